use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    /// Dotted path, e.g. `vcr.block3.in_proj.weight`.
    pub name: String,
    pub value: Arc<Tensor>,
    /// Frozen parameters enter tapes as constants and are skipped by optimizers.
    pub frozen: bool,
}

/// Named parameters of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value: Arc::new(value), frozen: false });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    /// Mutable access; clones the tensor if a tape still holds it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let cur = &self.params[id.0];
        if cur.value.shape() != value.shape() {
            return Err(Error::dim(format!("parameter {} has shape {:?}, got {:?}", cur.name, cur.value.shape(), value.shape())));
        }
        self.params[id.0].value = Arc::new(value);
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Freeze or unfreeze every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
            n += 1;
        }
        n
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Registers parameters under a dotted name prefix with the default
/// initialization rules.
pub struct ParamBuilder<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
    prefix: String,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R, prefix: &str) -> Self {
        ParamBuilder { store, rng, prefix: prefix.to_string() }
    }

    pub fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{}", self.prefix, leaf)
        }
    }

    pub fn sub(&mut self, scope: &str) -> ParamBuilder<'_, R> {
        let prefix = self.name(scope);
        ParamBuilder { store: self.store, rng: self.rng, prefix }
    }

    pub fn rng(&mut self) -> &mut R {
        self.rng
    }

    pub fn tensor(&mut self, leaf: &str, value: Tensor) -> Result<ParamId> {
        let name = self.name(leaf);
        self.store.add(name, value)
    }

    pub fn zeros(&mut self, leaf: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(leaf, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, leaf: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(leaf, Tensor::full(shape, 1.0))
    }

    /// Uniform in `[-1/√fan_in, 1/√fan_in]`.
    pub fn fan_in(&mut self, leaf: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = rng::uniform_tensor(self.rng, shape, -bound, bound);
        self.tensor(leaf, t)
    }

    pub fn normal(&mut self, leaf: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let t = rng::normal_tensor(self.rng, shape).map(|v| v * std);
        self.tensor(leaf, t)
    }
}
