use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::BackboneConfig;
use super::vocab::Vocabulary;
use crate::autograd::{attention_forward, attention_mask, Graph, MemoryVisibility, Var};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Memory keys and values prepended to one layer's self-attention.
#[derive(Clone, Copy, Debug)]
pub struct MemoryKv {
    /// `p x d` keys, split over heads like the backbone's own keys.
    pub keys: Var,
    /// `p x d` values.
    pub values: Var,
    pub visibility: MemoryVisibility,
}

/// Per-layer hooks through which a memory read path enters the forward pass.
///
/// `begin` is called once per forward with the embedding output, before
/// layer 0; the other hooks are called for every layer in order.
pub trait Injection<T: Scalar> {
    fn begin(&mut self, _g: &mut Graph<T>, _embedded: Var) -> Result<()> {
        Ok(())
    }

    fn memory_kv(&mut self, _g: &mut Graph<T>, _layer: usize) -> Result<Option<MemoryKv>> {
        Ok(None)
    }

    /// Post-processes the residual stream after the attention sub-block.
    fn post_attention(&mut self, _g: &mut Graph<T>, _layer: usize, hidden: Var) -> Result<Var> {
        Ok(hidden)
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w_fc: ParamId,
    b_fc: ParamId,
    w_proj: ParamId,
    b_proj: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    wte: ParamId,
    wpe: ParamId,
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
}

/// Pre-norm GPT-style decoder with learned positions and a tied output head.
#[derive(Clone, Debug)]
pub struct Backbone<T> {
    config: BackboneConfig,
    vocab: Vocabulary,
    params: ParamSet<T>,
    ids: Ids,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Input to each layer, `H^(0)..H^(L-1)`.
    pub layer_inputs: Vec<Var>,
    /// Final-norm output `H_t`, the representation fed to the head.
    pub hidden: Var,
    pub logits: Var,
    /// Per-layer attention weights (`heads x n x (p + n)`), when captured.
    pub attention: Vec<Vec<f64>>,
}

/// Layer inputs plus the final hidden state, `L + 1` matrices in all.
#[derive(Clone, Debug)]
pub struct HiddenStates<T> {
    pub layers: Vec<Tensor<T>>,
    pub last: Tensor<T>,
}

impl<T: Scalar> HiddenStates<T> {
    pub fn count(&self) -> usize {
        self.layers.len() + 1
    }
}

impl ForwardPass {
    pub fn hidden_states<T: Scalar>(&self, g: &Graph<T>) -> HiddenStates<T> {
        HiddenStates {
            layers: self.layer_inputs.iter().map(|&v| g.value(v).clone()).collect(),
            last: g.value(self.hidden).clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub capture_attention: bool,
}

/// Result of greedy decoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    /// Prompt followed by the appended tokens (the stop token is not kept).
    pub tokens: Vec<usize>,
    pub new_tokens: Vec<usize>,
    /// Generation stopped because the context filled up.
    pub truncated: bool,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(config: BackboneConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.len() > config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary of {} words exceeds vocab_size {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let hidden = d * config.mlp_ratio;
        let std = 0.02;
        let proj_std = 0.02 / (2.0 * config.n_layers as f64).sqrt();
        let mut params = ParamSet::new();
        let wte = params.add("wte", Tensor::randn(&[config.vocab_size, d], std, &mut rng), true);
        let wpe = params.add("wpe", Tensor::randn(&[config.max_context, d], 0.01, &mut rng), true);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut add = |name: &str, t: Tensor<T>| params.add(format!("h{l}.{name}"), t, true);
            layers.push(LayerIds {
                ln1_g: add("ln1.g", Tensor::full(&[d], T::one())),
                ln1_b: add("ln1.b", Tensor::zeros(&[d])),
                wq: add("attn.wq", Tensor::randn(&[d, d], std, &mut rng)),
                bq: add("attn.bq", Tensor::zeros(&[d])),
                wk: add("attn.wk", Tensor::randn(&[d, d], std, &mut rng)),
                bk: add("attn.bk", Tensor::zeros(&[d])),
                wv: add("attn.wv", Tensor::randn(&[d, d], std, &mut rng)),
                bv: add("attn.bv", Tensor::zeros(&[d])),
                wo: add("attn.wo", Tensor::randn(&[d, d], proj_std, &mut rng)),
                bo: add("attn.bo", Tensor::zeros(&[d])),
                ln2_g: add("ln2.g", Tensor::full(&[d], T::one())),
                ln2_b: add("ln2.b", Tensor::zeros(&[d])),
                w_fc: add("mlp.w_fc", Tensor::randn(&[d, hidden], std, &mut rng)),
                b_fc: add("mlp.b_fc", Tensor::zeros(&[hidden])),
                w_proj: add("mlp.w_proj", Tensor::randn(&[hidden, d], proj_std, &mut rng)),
                b_proj: add("mlp.b_proj", Tensor::zeros(&[d])),
            });
        }
        let lnf_g = params.add("ln_f.g", Tensor::full(&[d], T::one()), true);
        let lnf_b = params.add("ln_f.b", Tensor::zeros(&[d]), true);
        Ok(Backbone {
            config,
            vocab,
            params,
            ids: Ids {
                wte,
                wpe,
                layers,
                lnf_g,
                lnf_b,
            },
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn freeze(&mut self) {
        self.params.freeze();
    }

    pub fn is_frozen(&self) -> bool {
        self.params.iter().all(|p| !p.requires_grad)
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    /// Frozen forward with optional memory injection.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        tokens: &[usize],
        hooks: Option<&mut dyn Injection<T>>,
    ) -> Result<ForwardPass> {
        self.forward_with(g, tokens, hooks, ForwardOptions::default())
    }

    pub fn forward_with(
        &self,
        g: &mut Graph<T>,
        tokens: &[usize],
        mut hooks: Option<&mut dyn Injection<T>>,
        opts: ForwardOptions,
    ) -> Result<ForwardPass> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::Validation("empty token sequence".into()));
        }
        if n > self.config.max_context {
            return Err(Error::ContextOverflow {
                len: n,
                max: self.config.max_context,
            });
        }
        let p = |id| self.params.get(id);
        let wte = g.param(p(self.ids.wte));
        let wpe = g.param(p(self.ids.wpe));
        let tok = g.gather_rows(wte, tokens)?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = g.gather_rows(wpe, &positions)?;
        let mut x = g.add(tok, pos)?;
        if let Some(h) = hooks.as_deref_mut() {
            h.begin(g, x)?;
        }
        let causal = attention_mask::<T>(n, None);
        let mut layer_inputs = Vec::with_capacity(self.config.n_layers);
        let mut attention = Vec::new();
        for layer in 0..self.config.n_layers {
            layer_inputs.push(x);
            let memory = match hooks.as_deref_mut() {
                Some(h) => h.memory_kv(g, layer)?,
                None => None,
            };
            let attn = self.self_attention(g, layer, x, memory, &causal, opts, &mut attention)?;
            x = g.add(x, attn)?;
            if let Some(h) = hooks.as_deref_mut() {
                x = h.post_attention(g, layer, x)?;
            }
            let mlp = self.mlp(g, layer, x)?;
            x = g.add(x, mlp)?;
        }
        let (lg, lb) = (g.param(p(self.ids.lnf_g)), g.param(p(self.ids.lnf_b)));
        let hidden = g.layer_norm(x, lg, lb)?;
        let logits = g.matmul_nt(hidden, wte)?;
        Ok(ForwardPass {
            layer_inputs,
            hidden,
            logits,
            attention,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn self_attention(
        &self,
        g: &mut Graph<T>,
        layer: usize,
        x: Var,
        memory: Option<MemoryKv>,
        causal: &Tensor<T>,
        opts: ForwardOptions,
        captured: &mut Vec<Vec<f64>>,
    ) -> Result<Var> {
        let ids = &self.ids.layers[layer];
        let p = |id| self.params.get(id);
        let (g1, b1) = (g.param(p(ids.ln1_g)), g.param(p(ids.ln1_b)));
        let h = g.layer_norm(x, g1, b1)?;
        let q = self.linear(g, h, ids.wq, ids.bq)?;
        let mut k = self.linear(g, h, ids.wk, ids.bk)?;
        let mut v = self.linear(g, h, ids.wv, ids.bv)?;
        let n = g.value(x).rows();
        let mask_storage;
        let mask = match memory {
            Some(mem) => {
                let (pk, pv) = (g.value(mem.keys), g.value(mem.values));
                if pk.shape() != [pk.rows(), self.config.d_model] || pk.shape() != pv.shape() {
                    return Err(Error::shape("memory kv", pk.shape(), pv.shape()));
                }
                let rows = pk.rows();
                k = g.concat_rows(mem.keys, k)?;
                v = g.concat_rows(mem.values, v)?;
                mask_storage = attention_mask::<T>(n, Some((rows, mem.visibility)));
                &mask_storage
            }
            None => causal,
        };
        if opts.capture_attention {
            let (_, probs) = attention_forward(g.value(q), g.value(k), g.value(v), mask, self.config.n_heads)?;
            captured.push(probs.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect());
        }
        let att = g.attention(q, k, v, mask, self.config.n_heads)?;
        self.linear(g, att, ids.wo, ids.bo)
    }

    fn mlp(&self, g: &mut Graph<T>, layer: usize, x: Var) -> Result<Var> {
        let ids = &self.ids.layers[layer];
        let p = |id| self.params.get(id);
        let (g2, b2) = (g.param(p(ids.ln2_g)), g.param(p(ids.ln2_b)));
        let h = g.layer_norm(x, g2, b2)?;
        let h = self.linear(g, h, ids.w_fc, ids.b_fc)?;
        let h = g.gelu(h)?;
        self.linear(g, h, ids.w_proj, ids.b_proj)
    }

    fn linear(&self, g: &mut Graph<T>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let wv = g.param(self.params.get(w));
        let bv = g.param(self.params.get(b));
        let y = g.matmul(x, wv)?;
        g.add_row_bias(y, bv)
    }

    /// Greedy decoding; each step is an independent forward over the whole
    /// sequence. Stops at the end-of-answer token, after `max_new` tokens, or
    /// when the context is full (flagged as truncated).
    pub fn generate(
        &self,
        prompt: &[usize],
        mut hooks: Option<&mut dyn Injection<T>>,
        max_new: usize,
    ) -> Result<Generation> {
        let mut tokens = prompt.to_vec();
        let mut new_tokens = Vec::new();
        let mut truncated = false;
        for _ in 0..max_new {
            if tokens.len() >= self.config.max_context {
                truncated = true;
                break;
            }
            let mut g = Graph::no_grad();
            let step_hooks = hooks.as_mut().map(|h| &mut **h as &mut dyn Injection<T>);
            let pass = self.forward(&mut g, &tokens, step_hooks)?;
            let next = argmax_last_row(g.value(pass.logits));
            if next == self.vocab.eoa() {
                break;
            }
            tokens.push(next);
            new_tokens.push(next);
        }
        Ok(Generation {
            tokens,
            new_tokens,
            truncated,
        })
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "config": self.config,
            "vocab": self.vocab,
        });
        let mut c = Container::new("backbone", meta);
        for p in self.params.iter() {
            c.push(p.name.clone(), &p.value);
        }
        c
    }

    /// Loads frozen weights from a container.
    pub fn from_container(mut c: Container) -> Result<Self> {
        c.expect_kind("backbone")?;
        let config: BackboneConfig = serde_json::from_value(c.meta["config"].clone())?;
        let vocab: Vocabulary = serde_json::from_value(c.meta["vocab"].clone())?;
        let mut model = Backbone::new(config, vocab, 0)?;
        let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
        let mut values = Vec::with_capacity(names.len());
        for name in names {
            values.push((name.clone(), c.take(&name)?.cast::<T>()));
        }
        if let Some((extra, _)) = c.tensors.first() {
            return Err(Error::Format(format!("unexpected tensor `{extra}`")));
        }
        model.params.load_values(&values)?;
        model.freeze();
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

pub(crate) fn argmax_last_row<T: Scalar>(logits: &Tensor<T>) -> usize {
    let row = logits.row(logits.rows() - 1);
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        // strict comparison keeps the lowest index on ties
        if v > row[best] {
            best = i;
        }
    }
    best
}
