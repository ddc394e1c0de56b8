#![allow(dead_code)]

pub mod checks;
pub mod grad;
pub mod pipeline;

use latmem::backbone::{Backbone, BackboneConfig, Vocabulary};
use latmem::memory::{Adapter, Capacity, MemoryDims, MemoryKind, MemoryState, Method, WriteConfig};
use latmem::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny_vocab() -> Vocabulary {
    Vocabulary::new((0..20).map(|i| format!("w{i}")))
}

pub fn tiny_backbone(seed: u64) -> Backbone<f64> {
    let vocab = tiny_vocab();
    let mut model = Backbone::new(BackboneConfig::tiny(vocab.len()), vocab, seed).unwrap();
    model.freeze();
    model
}

/// n_P = 4 rows, Hebbian side 8, four slots with two written per turn.
pub fn tiny_dims() -> MemoryDims {
    MemoryDims {
        bank_size: 4,
        hebbian_dim: 8,
        slots: 4,
        top_k: 2,
    }
}

pub fn tiny_adapter(method: Method, seed: u64) -> Adapter<f64> {
    let write = WriteConfig::new(Capacity::X1).with_dims(tiny_dims());
    let cfg = BackboneConfig::tiny(tiny_vocab().len());
    Adapter::new(method, write, &cfg, seed).unwrap()
}

/// Replaces every trainable value, including the zero-initialised ones, with
/// Gaussian noise so no gradient is trivially zero.
pub fn scramble(adapter: &mut Adapter<f64>, seed: u64) {
    let mut r = rng(seed);
    for p in adapter.params_mut().iter_mut() {
        if p.requires_grad {
            p.value = Tensor::randn(p.value.shape(), 0.3, &mut r);
        }
    }
}

pub fn random_state(adapter: &Adapter<f64>, seed: u64) -> MemoryState<f64> {
    let mut r = rng(seed);
    let mut state = adapter.init_state().unwrap();
    state.kind = match state.kind {
        MemoryKind::Bank(p) => MemoryKind::Bank(Tensor::randn(p.shape(), 1.0, &mut r)),
        MemoryKind::LayerBanks(b) => {
            MemoryKind::LayerBanks(b.iter().map(|p| Tensor::randn(p.shape(), 1.0, &mut r)).collect())
        }
        MemoryKind::Hebbian(m) => MemoryKind::Hebbian(Tensor::randn(m.shape(), 1.0, &mut r)),
        MemoryKind::Slots { bank, .. } => MemoryKind::Slots {
            bank: Tensor::randn(bank.shape(), 1.0, &mut r),
            last_written: Vec::new(),
        },
    };
    state
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}
