use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::param::{ParamId, ParamSet};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// The learning rate ramps linearly over this many steps.
    pub warmup_steps: usize,
    /// Global gradient-norm ceiling applied before each step.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 200,
            clip_norm: Some(1.0),
        }
    }
}

impl AdamWConfig {
    /// Learning rate in effect at (1-based) step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct OptimizerState<T> {
    step: usize,
    moments: HashMap<ParamId, (Vec<T>, Vec<T>)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: usize,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new() -> Self {
        OptimizerState {
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }
}

/// L2 norm over every accumulated gradient in the set.
pub fn grad_norm<T: Scalar>(params: &ParamSet<T>) -> f64 {
    params
        .iter()
        .filter_map(|p| p.grad.as_ref())
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let x = v.to_f64().unwrap_or(f64::NAN);
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

pub fn scale_grads<T: Scalar>(params: &mut ParamSet<T>, factor: f64) {
    let f = T::cst(factor);
    for p in params.iter_mut() {
        if let Some(g) = &mut p.grad {
            for v in g.data_mut() {
                *v *= f;
            }
        }
    }
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(params: &mut ParamSet<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if norm > max_norm && norm.is_finite() {
        scale_grads(params, max_norm / norm);
    }
    norm
}

/// One AdamW update with decoupled weight decay and bias-corrected moments.
/// Parameters without a gradient are left untouched, weight decay included.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamSet<T>,
    opt: &mut OptimizerState<T>,
    cfg: &AdamWConfig,
) -> StepStats {
    opt.step += 1;
    let t = opt.step;
    let lr = cfg.lr_at(t);
    let norm = match cfg.clip_norm {
        Some(max) => clip_grad_norm(params, max),
        None => grad_norm(params),
    };
    let (b1, b2) = (T::cst(cfg.beta1), T::cst(cfg.beta2));
    let bc1 = T::cst(1.0 - cfg.beta1.powi(t as i32));
    let bc2 = T::cst(1.0 - cfg.beta2.powi(t as i32));
    let decay = T::cst(1.0 - lr * cfg.weight_decay);
    let (lr_t, eps) = (T::cst(lr), T::cst(cfg.eps));
    for p in params.iter_mut() {
        if !p.requires_grad {
            continue;
        }
        let Some(grad) = &p.grad else { continue };
        let n = grad.numel();
        let (m, v) = opt
            .moments
            .entry(p.id())
            .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
        let g = grad.data();
        let w = p.value.data_mut();
        for i in 0..n {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] = w[i] * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    StepStats {
        step: t,
        grad_norm: norm,
        lr,
    }
}
