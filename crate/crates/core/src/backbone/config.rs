use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the frozen GPT-style decoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Per-head key and value width (`d_k == d_v`).
    pub d_head: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_head: 32,
            vocab_size: 512,
            max_context: 256,
            mlp_ratio: 4,
        }
    }
}

impl BackboneConfig {
    /// Tiny configuration used by gradient checks.
    pub fn tiny(vocab_size: usize) -> Self {
        BackboneConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            d_head: 16,
            vocab_size,
            max_context: 16,
            mlp_ratio: 2,
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_head
    }

    pub fn d_v(&self) -> usize {
        self.d_head
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.n_heads * self.d_head != self.d_model {
            return Err(Error::Config(format!(
                "n_heads ({}) * d_head ({}) must equal d_model ({})",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.max_context == 0 || self.n_layers == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config(
                "max_context, n_layers and mlp_ratio must be positive".into(),
            ));
        }
        Ok(())
    }
}
