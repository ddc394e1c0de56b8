use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Capacity, Method, WriteConfig};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Persistent state carried across turns and sessions.
#[derive(Clone, Debug, PartialEq)]
pub enum MemoryKind<T> {
    /// Dense bank `n_P x d` (M.1, M.2, M.5).
    Bank(Tensor<T>),
    /// One dense bank per layer (M.3).
    LayerBanks(Vec<Tensor<T>>),
    /// Associative matrix `d_h x d_h` (M.4).
    Hebbian(Tensor<T>),
    /// Slot bank `S x d` and the slots touched by the latest write (M.6).
    Slots {
        bank: Tensor<T>,
        last_written: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState<T> {
    pub kind: MemoryKind<T>,
    /// Number of writes applied since initialisation.
    pub turn: u64,
}

/// Zero-initialised state for a method.
pub fn init_memory<T: Scalar>(
    method: Method,
    config: &WriteConfig,
    d_model: usize,
    n_layers: usize,
) -> Result<MemoryState<T>> {
    config.validate()?;
    let dims = config.dims;
    let kind = match method {
        Method::M1 | Method::M2 | Method::M5 => MemoryKind::Bank(Tensor::zeros(&[dims.bank_size, d_model])),
        Method::M3 => MemoryKind::LayerBanks(
            (0..n_layers)
                .map(|_| Tensor::zeros(&[dims.bank_size, d_model]))
                .collect(),
        ),
        Method::M4 => MemoryKind::Hebbian(Tensor::zeros(&[dims.hebbian_dim, dims.hebbian_dim])),
        Method::M6 => MemoryKind::Slots {
            bank: Tensor::zeros(&[dims.slots, d_model]),
            last_written: Vec::new(),
        },
    };
    Ok(MemoryState { kind, turn: 0 })
}

impl<T: Scalar> MemoryState<T> {
    /// Whether this state has the variant `method` reads and writes.
    pub fn matches(&self, method: Method) -> bool {
        matches!(
            (&self.kind, method),
            (MemoryKind::Bank(_), Method::M1 | Method::M2 | Method::M5)
                | (MemoryKind::LayerBanks(_), Method::M3)
                | (MemoryKind::Hebbian(_), Method::M4)
                | (MemoryKind::Slots { .. }, Method::M6)
        )
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        match &self.kind {
            MemoryKind::Bank(p) | MemoryKind::Hebbian(p) => vec![p],
            MemoryKind::LayerBanks(banks) => banks.iter().collect(),
            MemoryKind::Slots { bank, .. } => vec![bank],
        }
    }

    /// Frobenius norm over every state tensor.
    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|t| t.frobenius_norm().to_f64().unwrap_or(f64::NAN).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.turn.to_le_bytes());
        for t in self.tensors() {
            t.hash_into(&mut hasher);
        }
        if let MemoryKind::Slots { last_written, .. } = &self.kind {
            for &j in last_written {
                hasher.update((j as u64).to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn to_container(&self, method: Method, capacity: Capacity) -> Container {
        let last_written = match &self.kind {
            MemoryKind::Slots { last_written, .. } => last_written.clone(),
            _ => Vec::new(),
        };
        let meta = serde_json::json!({
            "method": method,
            "capacity": capacity,
            "turn": self.turn,
            "last_written": last_written,
            "scalar": T::NAME,
        });
        let mut c = Container::new("memory", meta);
        for (i, t) in self.tensors().into_iter().enumerate() {
            c.push(format!("state.{i}"), t);
        }
        c
    }

    /// Restores a snapshot, refusing one written for another method.
    pub fn from_container(mut c: Container, method: Method) -> Result<(Self, Capacity)> {
        c.expect_kind("memory")?;
        let found: Method = serde_json::from_value(c.meta["method"].clone())?;
        if found != method {
            return Err(Error::MethodMismatch {
                expected: method.to_string(),
                found: found.to_string(),
            });
        }
        let capacity: Capacity = serde_json::from_value(c.meta["capacity"].clone())?;
        let turn: u64 = serde_json::from_value(c.meta["turn"].clone())?;
        let last_written: Vec<usize> = serde_json::from_value(c.meta["last_written"].clone())?;
        let count = c.tensors.len();
        let mut tensors = Vec::with_capacity(count);
        for i in 0..count {
            tensors.push(c.take(&format!("state.{i}"))?.cast::<T>());
        }
        let single = |mut ts: Vec<Tensor<T>>| -> Result<Tensor<T>> {
            if ts.len() != 1 {
                return Err(Error::Format(format!("expected one state tensor, found {}", ts.len())));
            }
            Ok(ts.remove(0))
        };
        let kind = match method {
            Method::M1 | Method::M2 | Method::M5 => MemoryKind::Bank(single(tensors)?),
            Method::M3 => MemoryKind::LayerBanks(tensors),
            Method::M4 => MemoryKind::Hebbian(single(tensors)?),
            Method::M6 => MemoryKind::Slots {
                bank: single(tensors)?,
                last_written,
            },
        };
        Ok((MemoryState { kind, turn }, capacity))
    }

    pub fn save(&self, path: &Path, method: Method, capacity: Capacity) -> Result<()> {
        self.to_container(method, capacity).save(path)
    }

    pub fn load(path: &Path, method: Method) -> Result<(Self, Capacity)> {
        Self::from_container(Container::load(path)?, method)
    }
}
