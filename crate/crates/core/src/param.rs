use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a parameter, stable across clones of its set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A named leaf tensor with an optional accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub requires_grad: bool,
    pub grad: Option<Tensor<T>>,
    id: ParamId,
}

impl<T: Scalar> Parameter<T> {
    pub fn id(&self) -> ParamId {
        self.id
    }
}

/// Ordered collection of parameters addressed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<ParamId, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, requires_grad: bool) -> ParamId {
        let id = ParamId::fresh();
        self.index.insert(id, self.params.len());
        self.params.push(Parameter {
            name: name.into(),
            value,
            requires_grad,
            grad: None,
            id,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[self.index[&id]]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        let i = self.index[&id];
        &mut self.params[i]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.get(id).value
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn freeze(&mut self) {
        for p in &mut self.params {
            p.requires_grad = false;
            p.grad = None;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.requires_grad)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Adds gradients for the trainable members of this set; gradients for
    /// other parameters are ignored and frozen members never receive one.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for p in &mut self.params {
            if !p.requires_grad {
                continue;
            }
            if let Some(g) = grads.param(p.id) {
                match &mut p.grad {
                    Some(acc) => {
                        if acc.shape() != g.shape() {
                            return Err(Error::shape("accumulate", acc.shape(), g.shape()));
                        }
                        for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => p.grad = Some(g.clone()),
                }
            }
        }
        Ok(())
    }

    /// Replaces values by name from another set with matching shapes.
    pub fn load_values(&mut self, values: &[(String, Tensor<T>)]) -> Result<()> {
        for (name, value) in values {
            let p = self
                .params
                .iter_mut()
                .find(|p| &p.name == name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor `{name}`")))?;
            if p.value.shape() != value.shape() {
                return Err(Error::shape("load_values", p.value.shape(), value.shape()));
            }
            p.value = value.clone();
        }
        Ok(())
    }

    pub fn named_values(&self) -> Vec<(String, Tensor<T>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Hash over names and bitwise values, used for the freeze contract.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            hasher.update(p.name.as_bytes());
            p.value.hash_into(&mut hasher);
        }
        hex::encode(hasher.finalize())
    }
}

/// Gradients produced by one backward pass, keyed by parameter or leaf.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    pub(crate) by_param: HashMap<ParamId, Tensor<T>>,
    pub(crate) by_leaf: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(&id)
    }

    pub fn leaf(&self, var: crate::autograd::Var) -> Option<&Tensor<T>> {
        self.by_leaf.get(&var.index())
    }

    pub fn param_count(&self) -> usize {
        self.by_param.len()
    }
}
