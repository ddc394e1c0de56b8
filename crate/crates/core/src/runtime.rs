//! Online conversations with a frozen adapter: memory accumulates turn by
//! turn and across sessions.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::backbone::{Backbone, Generation, Injection};
use crate::bench::Turn;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::memory::{Adapter, Method, MemoryState, ReadHooks};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub index: usize,
    pub speaker: String,
    pub text: String,
    /// Frobenius norm of the memory after the turn was written.
    pub memory_norm: f64,
}

/// Output of one processed turn.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TurnOutput {
    pub answer: Vec<usize>,
    /// Input was cut from the left to fit the context.
    pub input_truncated: bool,
    /// Generation ran into the end of the context.
    pub generation_truncated: bool,
}

/// One conversation over a frozen backbone and (optionally) a frozen adapter.
/// Without an adapter the handle is the stateless baseline.
#[derive(Clone, Debug)]
pub struct ConversationHandle<'a, T> {
    backbone: &'a Backbone<T>,
    adapter: Option<&'a Adapter<T>>,
    state: Option<MemoryState<T>>,
    adapter_hash: String,
    transcript: Vec<TranscriptEntry>,
}

impl<'a, T: Scalar> ConversationHandle<'a, T> {
    pub fn new(backbone: &'a Backbone<T>, adapter: &'a Adapter<T>) -> Result<Self> {
        if adapter.trainable_count() != 0 {
            return Err(Error::Contract("conversations need a frozen adapter".into()));
        }
        if adapter.d_model() != backbone.config().d_model || adapter.n_layers() != backbone.config().n_layers {
            return Err(Error::Contract("adapter was built for a different backbone".into()));
        }
        Ok(ConversationHandle {
            backbone,
            adapter: Some(adapter),
            state: Some(adapter.init_state()?),
            adapter_hash: adapter.fingerprint(),
            transcript: Vec::new(),
        })
    }

    pub fn baseline(backbone: &'a Backbone<T>) -> Self {
        ConversationHandle {
            backbone,
            adapter: None,
            state: None,
            adapter_hash: String::new(),
            transcript: Vec::new(),
        }
    }

    pub fn method(&self) -> Option<Method> {
        self.adapter.map(|a| a.method())
    }

    pub fn memory(&self) -> Option<&MemoryState<T>> {
        self.state.as_ref()
    }

    pub fn memory_norm(&self) -> f64 {
        self.state.as_ref().map_or(0.0, |s| s.norm())
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    pub fn turns(&self) -> usize {
        self.transcript.len()
    }

    fn check_adapter(&self) -> Result<()> {
        if let Some(a) = self.adapter {
            if a.fingerprint() != self.adapter_hash {
                return Err(Error::Contract("adapter changed during the conversation".into()));
            }
        }
        Ok(())
    }

    /// Keeps the rightmost tokens that leave room for `reserve` more.
    fn fit(&self, tokens: &[usize], reserve: usize) -> Result<(Vec<usize>, bool)> {
        if tokens.is_empty() {
            return Err(Error::Validation("empty turn".into()));
        }
        let room = self.backbone.config().max_context.saturating_sub(reserve).max(1);
        if tokens.len() > room {
            Ok((tokens[tokens.len() - room..].to_vec(), true))
        } else {
            Ok((tokens.to_vec(), false))
        }
    }

    fn decode(&self, prompt: &[usize], max_new: usize) -> Result<Generation> {
        match (self.adapter, &self.state) {
            (Some(a), Some(s)) => {
                let mut hooks = ReadHooks::new(a, s)?;
                self.backbone.generate(prompt, Some(&mut hooks as &mut dyn Injection<T>), max_new)
            }
            _ => self.backbone.generate(prompt, None, max_new),
        }
    }

    /// Reads `P_{t-1}`, optionally generates, then writes `P_t` from the
    /// turn's hidden states. The input is the current turn only.
    pub fn run_turn(&mut self, speaker: &str, text: &str, tokens: &[usize], max_new: usize) -> Result<TurnOutput> {
        self.check_adapter()?;
        let (input, input_truncated) = self.fit(tokens, 0)?;
        let mut g = Graph::no_grad();
        let hidden = match (self.adapter, &self.state) {
            (Some(a), Some(s)) => {
                let mut hooks = ReadHooks::new(a, s)?;
                let pass = self.backbone.forward(&mut g, &input, Some(&mut hooks))?;
                Some(pass.hidden_states(&g))
            }
            _ => {
                self.backbone.forward(&mut g, &input, None)?;
                None
            }
        };
        if g.recorded_ops() != 0 {
            return Err(Error::Contract("a conversation turn recorded gradient operations".into()));
        }
        let generation = if max_new > 0 {
            let prompt = if input.len() >= self.backbone.config().max_context {
                &input[1..]
            } else {
                &input[..]
            };
            Some(self.decode(prompt, max_new)?)
        } else {
            None
        };
        if let (Some(a), Some(state), Some(h)) = (self.adapter, self.state.as_mut(), hidden) {
            a.write_step(state, &h)?;
        }
        self.transcript.push(TranscriptEntry {
            index: self.transcript.len(),
            speaker: speaker.to_string(),
            text: text.to_string(),
            memory_norm: self.memory_norm(),
        });
        Ok(TurnOutput {
            answer: generation.as_ref().map(|g| g.new_tokens.clone()).unwrap_or_default(),
            input_truncated,
            generation_truncated: generation.is_some_and(|g| g.truncated),
        })
    }

    /// Encodes and processes a dataset turn without generating.
    pub fn feed(&mut self, turn: &Turn) -> Result<TurnOutput> {
        let tokens = self.backbone.vocab().encode(&turn.render()).ids;
        self.run_turn(&turn.speaker, &turn.text, &tokens, 0)
    }

    /// Answers a probe from the current memory without writing to it.
    pub fn ask(&self, prompt: &[usize], max_new: usize) -> Result<Generation> {
        self.check_adapter()?;
        let (input, _) = self.fit(prompt, 1)?;
        self.decode(&input, max_new)
    }

    /// Copy of the handle with its memory back at the initial state.
    pub fn ablate_memory(&self) -> Result<Self> {
        let mut copy = self.clone();
        copy.reset()?;
        Ok(copy)
    }

    /// Clears memory and transcript.
    pub fn reset(&mut self) -> Result<()> {
        if let Some(a) = self.adapter {
            self.state = Some(a.init_state()?);
        }
        self.transcript.clear();
        Ok(())
    }

    pub fn snapshot(&self, path: &Path) -> Result<()> {
        let (Some(a), Some(state)) = (self.adapter, &self.state) else {
            return Err(Error::Contract("the stateless baseline has no memory to snapshot".into()));
        };
        let mut c = state.to_container(a.method(), a.capacity());
        c.meta["adapter"] = serde_json::Value::String(self.adapter_hash.clone());
        c.meta["transcript"] = serde_json::to_value(&self.transcript)?;
        c.save(path)
    }

    /// Resumes a conversation saved by [`snapshot`](Self::snapshot).
    pub fn restore(backbone: &'a Backbone<T>, adapter: &'a Adapter<T>, path: &Path) -> Result<Self> {
        let mut handle = Self::new(backbone, adapter)?;
        let c = Container::load(path)?;
        let saved_adapter = c.meta["adapter"].as_str().map(str::to_string);
        let transcript: Vec<TranscriptEntry> = serde_json::from_value(c.meta["transcript"].clone())?;
        let (state, capacity) = MemoryState::from_container(c, adapter.method())?;
        if capacity != adapter.capacity() {
            return Err(Error::Validation(format!(
                "snapshot was taken at capacity {capacity}, adapter uses {}",
                adapter.capacity()
            )));
        }
        if saved_adapter.as_deref() != Some(handle.adapter_hash.as_str()) {
            return Err(Error::Validation("snapshot was taken with different adapter weights".into()));
        }
        let fresh = adapter.init_state()?;
        let shapes = |s: &MemoryState<T>| s.tensors().iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>();
        if shapes(&fresh) != shapes(&state) {
            return Err(Error::Validation("snapshot dimensions do not match the adapter".into()));
        }
        if state.turn != transcript.len() as u64 {
            return Err(Error::Format("snapshot turn counter disagrees with its transcript".into()));
        }
        handle.state = Some(state);
        handle.transcript = transcript;
        Ok(handle)
    }

    /// One JSON object per line: index, speaker, text, memory norm.
    pub fn export_transcript(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.transcript {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}
