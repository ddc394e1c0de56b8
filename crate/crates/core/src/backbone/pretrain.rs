use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::BackboneConfig;
use super::model::Backbone;
use super::vocab::Vocabulary;
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::train::adamw::{adamw_step, AdamWConfig, OptimizerState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub steps: usize,
    /// Documents per optimizer step.
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            steps: 6000,
            batch_size: 8,
            optimizer: AdamWConfig {
                lr: 3e-3,
                weight_decay: 0.0,
                warmup_steps: 100,
                clip_norm: Some(1.0),
                ..AdamWConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PretrainReport {
    pub train_loss: Vec<f64>,
    pub initial_heldout_loss: f64,
    pub final_heldout_loss: f64,
    /// Set when the loss never decreased over the run.
    pub warning: Option<String>,
}

/// Mean next-token cross-entropy over documents, without recording gradients.
pub fn heldout_loss<T: Scalar>(model: &Backbone<T>, docs: &[Vec<usize>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for doc in docs {
        if doc.len() < 2 {
            continue;
        }
        let mut g = Graph::no_grad();
        let (inputs, targets) = (&doc[..doc.len() - 1], &doc[1..]);
        let pass = model.forward(&mut g, inputs, None)?;
        let loss = g.cross_entropy(pass.logits, targets)?;
        total += g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN) * targets.len() as f64;
        count += targets.len();
    }
    if count == 0 {
        return Err(Error::Config("held-out corpus has no predictable tokens".into()));
    }
    Ok(total / count as f64)
}

/// Trains a fresh backbone on tokenized documents and returns it frozen.
pub fn pretrain<T: Scalar>(
    train_docs: &[Vec<usize>],
    heldout_docs: &[Vec<usize>],
    vocab: Vocabulary,
    config: BackboneConfig,
    opts: &PretrainOptions,
) -> Result<(Backbone<T>, PretrainReport)> {
    let usable: Vec<&Vec<usize>> = train_docs.iter().filter(|d| d.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::Config("pretraining corpus is empty".into()));
    }
    if let Some(d) = usable.iter().find(|d| d.len() > config.max_context + 1) {
        return Err(Error::ContextOverflow {
            len: d.len() - 1,
            max: config.max_context,
        });
    }
    if let Some(&bad) = usable.iter().flat_map(|d| d.iter()).find(|&&t| t >= config.vocab_size) {
        return Err(Error::Index {
            what: "vocabulary",
            index: bad,
            size: config.vocab_size,
        });
    }
    let mut model = Backbone::<T>::new(config, vocab, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let mut opt = OptimizerState::new();
    let mut report = PretrainReport {
        initial_heldout_loss: heldout_loss(&model, heldout_docs)?,
        ..PretrainReport::default()
    };
    for _ in 0..opts.steps {
        model.params_mut().zero_grad();
        let mut step_loss = 0.0;
        let mut tokens = 0usize;
        let batch: Vec<&Vec<usize>> = (0..opts.batch_size)
            .map(|_| *usable.choose(&mut rng).expect("non-empty"))
            .collect();
        let total_targets: usize = batch.iter().map(|d| d.len() - 1).sum();
        for doc in batch {
            let mut g = Graph::new();
            let (inputs, targets) = (&doc[..doc.len() - 1], &doc[1..]);
            let pass = model.forward(&mut g, inputs, None)?;
            let loss = g.cross_entropy(pass.logits, targets)?;
            // weight each document by its share of the batch's target tokens
            let weight = T::cst(targets.len() as f64 / total_targets as f64);
            let weighted = g.scale(loss, weight)?;
            step_loss += g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN) * targets.len() as f64;
            tokens += targets.len();
            let grads = g.backward(weighted)?;
            model.params_mut().accumulate(&grads)?;
        }
        let mean = step_loss / tokens as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged {
                step: report.train_loss.len(),
                method: "pretrain".into(),
                detail: format!("loss {mean}"),
            });
        }
        report.train_loss.push(mean);
        adamw_step(model.params_mut(), &mut opt, &opts.optimizer);
    }
    model.freeze();
    report.final_heldout_loss = heldout_loss(&model, heldout_docs)?;
    if opts.steps > 0 && report.final_heldout_loss >= report.initial_heldout_loss {
        report.warning = Some(format!(
            "held-out loss did not decrease ({:.4} -> {:.4})",
            report.initial_heldout_loss, report.final_heldout_loss
        ));
    }
    Ok((model, report))
}
