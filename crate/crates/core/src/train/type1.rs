use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adamw::{adamw_step, grad_norm, scale_grads, AdamWConfig, OptimizerState};
use crate::autograd::Graph;
use crate::backbone::{Backbone, Injection};
use crate::bench::Dialogue;
use crate::error::{Error, Result};
use crate::memory::{Adapter, MemoryState, ReadHooks};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    /// Dialogues advanced side by side.
    pub batch_size: usize,
    /// Windows accumulated per optimizer step.
    pub grad_accum: usize,
    /// Turns per window.
    pub window: usize,
    pub patience: usize,
    /// Weight of the next-token loss on dialogue turns; question probes
    /// always carry weight one.
    pub turn_loss_weight: f64,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamWConfig::default(),
            epochs: 10,
            batch_size: 4,
            grad_accum: 4,
            window: 8,
            patience: 3,
            turn_loss_weight: 1.0,
            max_steps: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accum == 0 || self.window == 0 || self.patience == 0 {
            return Err(Error::Config(
                "epochs, batch_size, grad_accum, window and patience must be positive".into(),
            ));
        }
        if !(self.optimizer.lr >= 0.0) || !(self.turn_loss_weight >= 0.0) {
            return Err(Error::Config("learning rate and loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    /// Index of the first window in this step, counted within the batch.
    pub window: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    /// `None` when no epoch improved on the untrained adapter.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

/// Question asked after a turn: prompt tokens and answer tokens ending in
/// the end-of-answer marker.
#[derive(Clone, Debug)]
struct Probe {
    prompt: Vec<usize>,
    answer: Vec<usize>,
}

#[derive(Clone, Debug)]
struct Step {
    tokens: Vec<usize>,
    probes: Vec<Probe>,
}

fn dialogue_steps<T: Scalar>(backbone: &Backbone<T>, d: &Dialogue) -> Vec<Step> {
    let vocab = backbone.vocab();
    let max = backbone.config().max_context;
    let mut steps: Vec<Step> = d
        .turns()
        .map(|(_, _, t)| {
            let ids = vocab.encode(&t.render()).ids;
            let start = ids.len().saturating_sub(max);
            Step {
                tokens: ids[start..].to_vec(),
                probes: Vec::new(),
            }
        })
        .collect();
    for qa in &d.qa {
        let mut answer = vocab.encode(&qa.answer).ids;
        answer.push(vocab.eoa());
        if let Some(step) = steps.get_mut(qa.ask_after) {
            step.probes.push(Probe {
                prompt: vocab.encode(&qa.probe()).ids,
                answer,
            });
        }
    }
    steps
}

struct ItemLoss {
    loss: f64,
}

/// Reads the memory, scores the turn, writes the memory. With `train` set,
/// gradients are accumulated into the adapter's parameters.
fn run_step<T: Scalar>(
    backbone: &Backbone<T>,
    adapter: &mut Adapter<T>,
    state: &mut MemoryState<T>,
    step: &Step,
    turn_weight: f64,
    train: bool,
) -> Result<Vec<ItemLoss>> {
    let mut out = Vec::new();
    let supervise_turn = turn_weight > 0.0 && step.tokens.len() >= 2;
    let mut g = if train && supervise_turn { Graph::new() } else { Graph::no_grad() };
    let hidden = {
        let mut hooks = ReadHooks::new(adapter, state)?;
        let pass = backbone.forward(&mut g, &step.tokens, Some(&mut hooks as &mut dyn Injection<T>))?;
        let hidden = pass.hidden_states(&g);
        if supervise_turn {
            let n = step.tokens.len();
            let rows: Vec<usize> = (0..n - 1).collect();
            let picked = g.gather_rows(pass.logits, &rows)?;
            let loss = g.cross_entropy(picked, &step.tokens[1..])?;
            let weighted = g.scale(loss, T::cst(turn_weight))?;
            out.push(ItemLoss {
                loss: g.value(weighted).data()[0].to_f64().unwrap_or(f64::NAN),
            });
            if train {
                let grads = g.backward(weighted)?;
                drop(hooks);
                adapter.params_mut().accumulate(&grads)?;
            }
        }
        hidden
    };
    adapter.write_step(state, &hidden)?;
    for probe in &step.probes {
        let mut input = probe.prompt.clone();
        input.extend_from_slice(&probe.answer[..probe.answer.len() - 1]);
        let max = backbone.config().max_context;
        if input.len() > max {
            input.drain(..input.len() - max);
        }
        let first = input.len() + 1 - probe.answer.len();
        let mut g = if train { Graph::new() } else { Graph::no_grad() };
        let mut hooks = ReadHooks::new(adapter, state)?;
        let pass = backbone.forward(&mut g, &input, Some(&mut hooks as &mut dyn Injection<T>))?;
        let rows: Vec<usize> = (first - 1..input.len()).collect();
        let picked = g.gather_rows(pass.logits, &rows)?;
        let loss = g.cross_entropy(picked, &probe.answer)?;
        out.push(ItemLoss {
            loss: g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN),
        });
        if train {
            let grads = g.backward(loss)?;
            drop(hooks);
            adapter.params_mut().accumulate(&grads)?;
        }
    }
    Ok(out)
}

/// Mean per-item loss over a held-out set, with no gradient recording.
pub fn validate<T: Scalar>(
    backbone: &Backbone<T>,
    adapter: &Adapter<T>,
    val: &[Dialogue],
    turn_loss_weight: f64,
) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let mut scratch = adapter.clone();
    scratch.freeze();
    let (mut total, mut count) = (0.0, 0usize);
    for d in val {
        let mut state = scratch.init_state()?;
        for step in dialogue_steps(backbone, d) {
            for item in run_step(backbone, &mut scratch, &mut state, &step, turn_loss_weight, false)? {
                total += item.loss;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Config("validation set has no supervised items".into()));
    }
    Ok(total / count as f64)
}

/// Supervised training of the read parameters through the frozen backbone.
/// Writes use detached hidden states, so memory carries no graph across
/// turns. The adapter ends up holding the best parameters by validation
/// loss, frozen.
pub fn type1_train<T: Scalar>(
    backbone: &Backbone<T>,
    adapter: &mut Adapter<T>,
    train: &[Dialogue],
    val: &[Dialogue],
    cfg: &TrainConfig,
    mut log: impl FnMut(&StepLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if backbone.params().trainable_count() != 0 {
        return Err(Error::Contract("backbone must be frozen".into()));
    }
    let backbone_hash = backbone.fingerprint();
    let write_hash = adapter.write_params().fingerprint();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new();
    let steps_of: Vec<Vec<Step>> = train.iter().map(|d| dialogue_steps(backbone, d)).collect();
    let mut report = TrainReport {
        initial_val_loss: validate(backbone, adapter, val, cfg.turn_loss_weight)?,
        ..TrainReport::default()
    };
    report.best_val_loss = report.initial_val_loss;
    let mut best = adapter.params().named_values();
    let mut bad_epochs = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut done = false;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut epoch_loss, mut epoch_items) = (0.0, 0usize);
        'groups: for group in order.chunks(cfg.batch_size) {
            let mut states = group
                .iter()
                .map(|_| adapter.init_state())
                .collect::<Result<Vec<_>>>()?;
            let longest = group.iter().map(|&i| steps_of[i].len()).max().unwrap_or(0);
            let n_windows = longest.div_ceil(cfg.window);
            let mut window = 0;
            while window < n_windows {
                adapter.params_mut().zero_grad();
                let (mut loss, mut items) = (0.0, 0usize);
                let first_window = window;
                for _ in 0..cfg.grad_accum {
                    if window >= n_windows {
                        break;
                    }
                    let span = window * cfg.window..(window + 1) * cfg.window;
                    for (slot, &d) in group.iter().enumerate() {
                        let steps = &steps_of[d];
                        for step in steps.get(span.start..span.end.min(steps.len())).unwrap_or(&[]) {
                            for item in run_step(backbone, adapter, &mut states[slot], step, cfg.turn_loss_weight, true)? {
                                loss += item.loss;
                                items += 1;
                            }
                        }
                    }
                    window += 1;
                }
                if items == 0 {
                    continue;
                }
                scale_grads(adapter.params_mut(), 1.0 / items as f64);
                let mean = loss / items as f64;
                let norm = grad_norm(adapter.params());
                if !mean.is_finite() || !norm.is_finite() {
                    let detail = adapter
                        .params()
                        .iter()
                        .filter_map(|p| p.grad.as_ref().map(|g| format!("{}={:.3e}", p.name, g.frobenius_norm().to_f64().unwrap_or(f64::NAN))))
                        .collect::<Vec<_>>()
                        .join(" ");
                    return Err(Error::Diverged {
                        step: report.steps.len(),
                        method: adapter.method().to_string(),
                        detail: format!("loss {mean}; grad norms {detail}"),
                    });
                }
                let stats = adamw_step(adapter.params_mut(), &mut opt, &cfg.optimizer);
                let entry = StepLog {
                    step: stats.step,
                    epoch,
                    window: first_window,
                    loss: mean,
                    grad_norm: stats.grad_norm,
                    lr: stats.lr,
                };
                log(&entry);
                report.steps.push(entry);
                epoch_loss += loss;
                epoch_items += items;
                if cfg.max_steps.is_some_and(|m| stats.step >= m) {
                    done = true;
                    break 'groups;
                }
            }
        }
        let val_loss = validate(backbone, adapter, val, cfg.turn_loss_weight)?;
        report.epochs.push(EpochLog {
            epoch,
            train_loss: epoch_loss / epoch_items.max(1) as f64,
            val_loss,
        });
        if val_loss < report.best_val_loss {
            report.best_val_loss = val_loss;
            report.best_epoch = Some(epoch);
            best = adapter.params().named_values();
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.patience {
                report.stopped_early = true;
                break;
            }
        }
        if done {
            break;
        }
    }
    adapter.params_mut().load_values(&best)?;
    adapter.freeze();
    if backbone.fingerprint() != backbone_hash || adapter.write_params().fingerprint() != write_hash {
        return Err(Error::Contract("frozen weights changed during training".into()));
    }
    Ok(report)
}
