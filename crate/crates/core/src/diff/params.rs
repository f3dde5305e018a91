//! Named parameter registry.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients keyed by parameter name, in graph registration order.
pub type Gradients = IndexMap<String, Vec<f64>>;

/// Trainable tensors keyed by a dotted path, iterated in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: IndexMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        tensor.requires_grad = true;
        self.params.insert(name, tensor);
        Ok(())
    }

    /// Inserts a tensor drawn from `Normal(0, std)`.
    pub fn normal<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> Result<()> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::full(shape, 1.0))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Stores `grads` on the matching tensors; parameters absent from `grads`
    /// get an all-zero gradient.
    pub fn set_grads(&mut self, grads: &Gradients) -> Result<()> {
        for (name, t) in self.params.iter_mut() {
            match grads.get(name) {
                Some(g) => {
                    if g.len() != t.len() {
                        return Err(Error::shape_pair("set_grads", t.shape(), &[g.len()]));
                    }
                    t.grad = Some(g.clone());
                }
                None => t.grad = Some(vec![0.0; t.len()]),
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for t in self.params.values_mut() {
            t.grad = None;
        }
    }
}
