use super::adapter::Adapter;
use super::state::{MemoryKind, MemoryState};
use super::Method;
use crate::autograd::{Graph, MemoryVisibility, Var};
use crate::backbone::{Injection, MemoryKv};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Read path of one adapter over a fixed memory state, plugged into the
/// backbone forward pass.
pub struct ReadHooks<'a, T> {
    adapter: &'a Adapter<T>,
    state: &'a MemoryState<T>,
    /// Memory placed on the current graph, one entry per bank.
    banks: Vec<Var>,
    /// Hebbian recall `R_t` for the current forward.
    recall: Option<Var>,
}

impl<'a, T: Scalar> ReadHooks<'a, T> {
    pub fn new(adapter: &'a Adapter<T>, state: &'a MemoryState<T>) -> Result<Self> {
        if !state.matches(adapter.method()) {
            return Err(Error::Contract(format!(
                "memory state variant cannot be read by {}",
                adapter.method()
            )));
        }
        let d = adapter.d_model();
        let width_ok = match &state.kind {
            MemoryKind::Bank(p) | MemoryKind::Slots { bank: p, .. } => p.cols() == d,
            MemoryKind::LayerBanks(b) => b.len() == adapter.n_layers() && b.iter().all(|p| p.cols() == d),
            MemoryKind::Hebbian(m) => m.rows() == adapter.write_config().dims.hebbian_dim,
        };
        if !width_ok {
            return Err(Error::Contract("memory state dimensions do not match the adapter".into()));
        }
        Ok(ReadHooks {
            adapter,
            state,
            banks: Vec::new(),
            recall: None,
        })
    }

    fn param(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        Ok(g.param(self.adapter.param(name)?))
    }

    fn project(&self, g: &mut Graph<T>, source: Var, layer: usize) -> Result<(Var, Var)> {
        let wk = self.param(g, &format!("h{layer}.wk"))?;
        let wv = self.param(g, &format!("h{layer}.wv"))?;
        Ok((g.matmul(source, wk)?, g.matmul(source, wv)?))
    }

    /// Multi-head cross-attention from the residual stream to the bank.
    fn cross_attention(&self, g: &mut Graph<T>, layer: usize, hidden: Var, bank: Var) -> Result<Var> {
        let w = |g: &mut Graph<T>, name: &str| self.param(g, &format!("h{layer}.x.{name}"));
        let (wq, wk, wv, wo) = (w(g, "wq")?, w(g, "wk")?, w(g, "wv")?, w(g, "wo")?);
        let q = g.matmul(hidden, wq)?;
        let k = g.matmul(bank, wk)?;
        let v = g.matmul(bank, wv)?;
        let mask = Tensor::zeros(&[g.value(hidden).rows(), g.value(bank).rows()]);
        let att = g.attention(q, k, v, &mask, self.adapter.n_heads())?;
        g.matmul(att, wo)
    }
}

impl<T: Scalar> Injection<T> for ReadHooks<'_, T> {
    fn begin(&mut self, g: &mut Graph<T>, embedded: Var) -> Result<()> {
        self.banks = self.state.tensors().into_iter().map(|t| g.constant(t.clone())).collect();
        self.recall = None;
        if self.adapter.method() == Method::M4 {
            let wqh = self.param(g, "wqh")?;
            let query = g.matmul(embedded, wqh)?;
            self.recall = Some(g.matmul(query, self.banks[0])?);
        }
        Ok(())
    }

    fn memory_kv(&mut self, g: &mut Graph<T>, layer: usize) -> Result<Option<MemoryKv>> {
        let (source, visibility) = match self.adapter.method() {
            Method::M1 | Method::M6 => (self.banks[0], MemoryVisibility::Open),
            Method::M3 => (self.banks[layer], MemoryVisibility::Open),
            Method::M4 => (
                self.recall.ok_or_else(|| Error::Contract("hebbian recall missing".into()))?,
                MemoryVisibility::Causal,
            ),
            Method::M2 | Method::M5 => return Ok(None),
        };
        let (keys, values) = self.project(g, source, layer)?;
        Ok(Some(MemoryKv {
            keys,
            values,
            visibility,
        }))
    }

    fn post_attention(&mut self, g: &mut Graph<T>, layer: usize, hidden: Var) -> Result<Var> {
        match self.adapter.method() {
            Method::M2 => {
                let c = self.cross_attention(g, layer, hidden, self.banks[0])?;
                let beta = self.param(g, &format!("h{layer}.beta"))?;
                let scaled = g.scale_by(c, beta)?;
                g.add(hidden, scaled)
            }
            Method::M5 => {
                let c = self.cross_attention(g, layer, hidden, self.banks[0])?;
                let wg = self.param(g, &format!("h{layer}.wg"))?;
                let bg = self.param(g, &format!("h{layer}.bg"))?;
                let joint = g.concat_cols(hidden, c)?;
                let pre = g.matmul(joint, wg)?;
                let pre = g.add_row_bias(pre, bg)?;
                let gate = g.sigmoid(pre)?;
                let gated = g.mul(gate, c)?;
                g.add(hidden, gated)
            }
            _ => Ok(hidden),
        }
    }
}
