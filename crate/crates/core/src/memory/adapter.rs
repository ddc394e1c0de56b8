use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::state::{MemoryKind, MemoryState};
use super::write::{write_attention, write_hebbian, write_slot};
use super::{Capacity, Method, WriteConfig};
use crate::backbone::{BackboneConfig, HiddenStates};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::param::{ParamSet, Parameter};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fixed random projections of the attention-coupled write.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWriteParams<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
}

impl<T: Scalar> AttentionWriteParams<T> {
    /// Entries drawn from `N(0, 1/d)`.
    pub fn random<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        AttentionWriteParams {
            wq: Tensor::randn(&[d, d], std, rng),
            wk: Tensor::randn(&[d, d], std, rng),
            wv: Tensor::randn(&[d, d], std, rng),
        }
    }
}

fn attn<T>(prefix: String, w: &AttentionWriteParams<T>) -> Vec<(String, &Tensor<T>)> {
    vec![
        (format!("{prefix}wq"), &w.wq),
        (format!("{prefix}wk"), &w.wk),
        (format!("{prefix}wv"), &w.wv),
    ]
}

fn attn_mut<T>(prefix: String, w: &mut AttentionWriteParams<T>) -> Vec<(String, &mut Tensor<T>)> {
    vec![
        (format!("{prefix}wq"), &mut w.wq),
        (format!("{prefix}wk"), &mut w.wk),
        (format!("{prefix}wv"), &mut w.wv),
    ]
}

/// Write-side projections; never trained.
#[derive(Clone, Debug, PartialEq)]
pub enum WriteParams<T> {
    Shared(AttentionWriteParams<T>),
    PerLayer(Vec<AttentionWriteParams<T>>),
    Hebbian { proj_k: Tensor<T>, proj_v: Tensor<T> },
    Slot { wv: Tensor<T> },
}

impl<T: Scalar> WriteParams<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        match self {
            WriteParams::Shared(w) => attn(String::new(), w),
            WriteParams::PerLayer(ws) => ws
                .iter()
                .enumerate()
                .flat_map(|(l, w)| attn(format!("h{l}."), w))
                .collect(),
            WriteParams::Hebbian { proj_k, proj_v } => {
                vec![("proj_k".to_string(), proj_k), ("proj_v".to_string(), proj_v)]
            }
            WriteParams::Slot { wv } => vec![("wv".to_string(), wv)],
        }
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        match self {
            WriteParams::Shared(w) => attn_mut(String::new(), w),
            WriteParams::PerLayer(ws) => ws
                .iter_mut()
                .enumerate()
                .flat_map(|(l, w)| attn_mut(format!("h{l}."), w))
                .collect(),
            WriteParams::Hebbian { proj_k, proj_v } => {
                vec![("proj_k".to_string(), proj_k), ("proj_v".to_string(), proj_v)]
            }
            WriteParams::Slot { wv } => vec![("wv".to_string(), wv)],
        }
    }

    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.named() {
            hasher.update(name.as_bytes());
            t.hash_into(&mut hasher);
        }
        hex::encode(hasher.finalize())
    }
}

/// Trainable read parameters plus fixed write projections for one method.
///
/// Read parameter names:
/// - prefix methods (m1, m3, m6): `h{l}.wk`, `h{l}.wv`
/// - m2: `h{l}.x.{wq,wk,wv,wo}` and `h{l}.beta`
/// - m4: `wqh`, `h{l}.wk`, `h{l}.wv`
/// - m5: `h{l}.x.{wq,wk,wv,wo}`, `h{l}.wg`, `h{l}.bg`
/// - m6 also has `wa` and `ws` for slot addressing
#[derive(Clone, Debug)]
pub struct Adapter<T> {
    method: Method,
    write: WriteConfig,
    d_model: usize,
    n_layers: usize,
    n_heads: usize,
    params: ParamSet<T>,
    write_params: WriteParams<T>,
}

impl<T: Scalar> Adapter<T> {
    pub fn new(method: Method, write: WriteConfig, backbone: &BackboneConfig, seed: u64) -> Result<Self> {
        write.validate()?;
        backbone.validate()?;
        let d = backbone.d_model;
        let layers = backbone.n_layers;
        let dims = write.dims;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (d as f64).sqrt();
        let mut params = ParamSet::new();
        let zero_prefix = |params: &mut ParamSet<T>, rows: usize| {
            for l in 0..layers {
                params.add(format!("h{l}.wk"), Tensor::zeros(&[rows, d]), true);
                params.add(format!("h{l}.wv"), Tensor::zeros(&[rows, d]), true);
            }
        };
        let xattn = |params: &mut ParamSet<T>, rng: &mut ChaCha8Rng, l: usize| {
            for name in ["wq", "wk", "wv", "wo"] {
                params.add(format!("h{l}.x.{name}"), Tensor::randn(&[d, d], std, rng), true);
            }
        };
        let write_params = match method {
            Method::M1 | Method::M3 => {
                zero_prefix(&mut params, d);
                if method == Method::M1 {
                    WriteParams::Shared(AttentionWriteParams::random(d, &mut rng))
                } else {
                    WriteParams::PerLayer((0..layers).map(|_| AttentionWriteParams::random(d, &mut rng)).collect())
                }
            }
            Method::M2 => {
                for l in 0..layers {
                    xattn(&mut params, &mut rng, l);
                    params.add(format!("h{l}.beta"), Tensor::zeros(&[1]), true);
                }
                WriteParams::Shared(AttentionWriteParams::random(d, &mut rng))
            }
            Method::M4 => {
                params.add("wqh", Tensor::randn(&[d, dims.hebbian_dim], std, &mut rng), true);
                zero_prefix(&mut params, dims.hebbian_dim);
                WriteParams::Hebbian {
                    proj_k: Tensor::randn(&[d, dims.hebbian_dim], std, &mut rng),
                    proj_v: Tensor::randn(&[d, dims.hebbian_dim], std, &mut rng),
                }
            }
            Method::M5 => {
                for l in 0..layers {
                    xattn(&mut params, &mut rng, l);
                    params.add(format!("h{l}.wg"), Tensor::zeros(&[2 * d, d]), true);
                    params.add(format!("h{l}.bg"), Tensor::full(&[d], T::cst(-2.0)), true);
                }
                WriteParams::Shared(AttentionWriteParams::random(d, &mut rng))
            }
            Method::M6 => {
                params.add("wa", Tensor::randn(&[d, d], std, &mut rng), true);
                params.add("ws", Tensor::randn(&[d, d], std, &mut rng), true);
                zero_prefix(&mut params, d);
                WriteParams::Slot {
                    wv: Tensor::randn(&[d, d], std, &mut rng),
                }
            }
        };
        Ok(Adapter {
            method,
            write,
            d_model: d,
            n_layers: layers,
            n_heads: backbone.n_heads,
            params,
            write_params,
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn capacity(&self) -> Capacity {
        self.write.capacity
    }

    pub fn write_config(&self) -> &WriteConfig {
        &self.write
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn write_params(&self) -> &WriteParams<T> {
        &self.write_params
    }

    pub fn param(&self, name: &str) -> Result<&Parameter<T>> {
        self.params
            .by_name(name)
            .ok_or_else(|| Error::Contract(format!("{} adapter has no parameter `{name}`", self.method)))
    }

    /// Number of trained scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.trainable_count()
    }

    pub fn freeze(&mut self) {
        self.params.freeze();
    }

    /// Hash over read and write parameters.
    pub fn fingerprint(&self) -> String {
        format!("{}:{}", self.params.fingerprint(), self.write_params.fingerprint())
    }

    pub fn init_state(&self) -> Result<MemoryState<T>> {
        super::init_memory(self.method, &self.write, self.d_model, self.n_layers)
    }

    /// Applies this method's write rule from detached hidden states and
    /// advances the turn counter.
    pub fn write_step(&self, state: &mut MemoryState<T>, hidden: &HiddenStates<T>) -> Result<()> {
        if !state.matches(self.method) {
            return Err(Error::Contract(format!("memory state does not belong to {}", self.method)));
        }
        let decay = self.write.decay;
        match (&mut state.kind, &self.write_params) {
            (MemoryKind::Bank(p), WriteParams::Shared(w)) => {
                *p = write_attention(p, &hidden.last, w, decay)?;
            }
            (MemoryKind::LayerBanks(banks), WriteParams::PerLayer(ws)) => {
                if hidden.layers.len() != banks.len() || ws.len() != banks.len() {
                    return Err(Error::Contract(format!(
                        "per-layer write needs {} layer hidden states, got {}",
                        banks.len(),
                        hidden.layers.len()
                    )));
                }
                for ((bank, h), w) in banks.iter_mut().zip(&hidden.layers).zip(ws) {
                    *bank = write_attention(bank, h, w, decay)?;
                }
            }
            (MemoryKind::Hebbian(m), WriteParams::Hebbian { proj_k, proj_v }) => {
                *m = write_hebbian(m, &hidden.last, proj_k, proj_v, decay)?;
            }
            (MemoryKind::Slots { bank, last_written }, WriteParams::Slot { wv }) => {
                let wa = &self.param("wa")?.value;
                let ws = &self.param("ws")?.value;
                let (next, written) = write_slot(bank, &hidden.last, wa, ws, wv, decay, self.write.dims.top_k)?;
                *bank = next;
                *last_written = written;
            }
            _ => return Err(Error::Contract(format!("write parameters do not match {}", self.method))),
        }
        state.turn += 1;
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "method": self.method,
            "write": self.write,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "scalar": T::NAME,
        });
        let mut c = Container::new("adapter", meta);
        for p in self.params.iter() {
            c.push(format!("read.{}", p.name), &p.value);
        }
        for (name, t) in self.write_params.named() {
            c.push(format!("write.{name}"), t);
        }
        c
    }

    /// Loads an adapter; its read parameters come back frozen.
    pub fn from_container(mut c: Container, backbone: &BackboneConfig) -> Result<Self> {
        c.expect_kind("adapter")?;
        let method: Method = serde_json::from_value(c.meta["method"].clone())?;
        let write: WriteConfig = serde_json::from_value(c.meta["write"].clone())?;
        let d_model: usize = serde_json::from_value(c.meta["d_model"].clone())?;
        let n_layers: usize = serde_json::from_value(c.meta["n_layers"].clone())?;
        if d_model != backbone.d_model || n_layers != backbone.n_layers {
            return Err(Error::Validation(format!(
                "adapter built for d={d_model}, L={n_layers} but backbone has d={}, L={}",
                backbone.d_model, backbone.n_layers
            )));
        }
        let mut adapter = Adapter::new(method, write, backbone, 0)?;
        let names: Vec<String> = adapter.params.iter().map(|p| p.name.clone()).collect();
        let mut values = Vec::with_capacity(names.len());
        for name in names {
            values.push((name.clone(), c.take(&format!("read.{name}"))?.cast::<T>()));
        }
        adapter.params.load_values(&values)?;
        for (name, slot) in adapter.write_params.named_mut() {
            let t = c.take(&format!("write.{name}"))?.cast::<T>();
            if t.shape() != slot.shape() {
                return Err(Error::shape("adapter load", slot.shape(), t.shape()));
            }
            *slot = t;
        }
        if let Some((extra, _)) = c.tensors.first() {
            return Err(Error::Format(format!("unexpected tensor `{extra}`")));
        }
        adapter.freeze();
        Ok(adapter)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path, backbone: &BackboneConfig) -> Result<Self> {
        Self::from_container(Container::load(path)?, backbone)
    }
}
