//! The six persistent-memory methods: state types, write rules and the read
//! paths that inject memory into the frozen forward pass.

pub mod adapter;
pub mod read;
pub mod state;
pub mod write;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use adapter::{Adapter, AttentionWriteParams};
pub use read::ReadHooks;
pub use state::{init_memory, MemoryKind, MemoryState};
pub use write::{write_attention, write_hebbian, write_slot};

/// Memory method tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Self-attention KV prefix read from one shared bank.
    M1,
    /// Inserted parallel cross-attention scaled by a zero-initialised scalar.
    M2,
    /// Per-layer KV extension with per-layer banks and writes.
    M3,
    /// Hebbian associative matrix recalled into token-aligned KV entries.
    M4,
    /// Gated additive cross-attention branch.
    M5,
    /// Top-k sparse slot writes with a KV prefix read.
    M6,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::M1,
        Method::M2,
        Method::M3,
        Method::M4,
        Method::M5,
        Method::M6,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::M1 => "m1",
            Method::M2 => "m2",
            Method::M3 => "m3",
            Method::M4 => "m4",
            Method::M5 => "m5",
            Method::M6 => "m6",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::M1 => "M.1 KV prefix",
            Method::M2 => "M.2 Parallel XAttn",
            Method::M3 => "M.3 KV extension",
            Method::M4 => "M.4 Hebbian",
            Method::M5 => "M.5 Gated branch",
            Method::M6 => "M.6 Slot sparse",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method `{s}` (expected m1..m6)")))
    }
}

/// Memory capacity budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Capacity {
    #[serde(rename = "1x")]
    X1,
    #[serde(rename = "10x")]
    X10,
}

impl Capacity {
    pub fn tag(self) -> &'static str {
        match self {
            Capacity::X1 => "1x",
            Capacity::X10 => "10x",
        }
    }

    pub fn dims(self) -> MemoryDims {
        match self {
            Capacity::X1 => MemoryDims {
                bank_size: 64,
                hebbian_dim: 256,
                slots: 64,
                top_k: 8,
            },
            Capacity::X10 => MemoryDims {
                bank_size: 640,
                hebbian_dim: 810,
                slots: 640,
                top_k: 80,
            },
        }
    }
}

impl fmt::Display for Capacity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Capacity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "1x" => Ok(Capacity::X1),
            "10x" => Ok(Capacity::X10),
            _ => Err(Error::Config(format!("unknown capacity `{s}` (expected 1x or 10x)"))),
        }
    }
}

/// Memory sizes for one capacity condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryDims {
    /// Rows of the dense bank `n_P`.
    pub bank_size: usize,
    /// Side of the Hebbian matrix `d_h`.
    pub hebbian_dim: usize,
    /// Slot count `S`.
    pub slots: usize,
    /// Slots overwritten per turn.
    pub top_k: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WriteConfig {
    /// Decay `gamma` in `(0, 1]`.
    pub decay: f64,
    pub dims: MemoryDims,
    pub capacity: Capacity,
}

impl WriteConfig {
    pub fn new(capacity: Capacity) -> Self {
        WriteConfig {
            decay: 0.95,
            dims: capacity.dims(),
            capacity,
        }
    }

    /// Overrides the memory sizes, e.g. for miniature test configurations.
    pub fn with_dims(mut self, dims: MemoryDims) -> Self {
        self.dims = dims;
        self
    }

    pub fn validate(&self) -> Result<(), Error> {
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay {} outside (0, 1]", self.decay)));
        }
        let d = &self.dims;
        if d.top_k == 0 || d.top_k > d.slots {
            return Err(Error::Config(format!(
                "top-k {} must lie in 1..={}",
                d.top_k, d.slots
            )));
        }
        if d.bank_size == 0 || d.hebbian_dim == 0 {
            return Err(Error::Config("memory sizes must be positive".into()));
        }
        Ok(())
    }
}
