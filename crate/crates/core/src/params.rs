//! Named parameter blocks shared by both networks.
//!
//! Blocks keep their insertion order; weights files, Adam state and gradient
//! accumulators all index parameters by that order.

use crate::autodiff::{NodeId, Tape};
use crate::error::CoreError;
use crate::rng::Xorshift64Star;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;

#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    /// Registers a block and returns its index. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        let name = name.into();
        assert!(
            self.index_of(&name).is_none(),
            "duplicate parameter block {name}"
        );
        self.entries.push((name, tensor));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.entries[index].0
    }

    pub fn tensor(&self, index: usize) -> &Tensor<T> {
        &self.entries[index].1
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.entries[index].1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index_of(name)
            .map(|i| self.tensor(i))
            .ok_or_else(|| CoreError::contract(format!("missing parameter block {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers every block as a differentiable leaf, in block order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<NodeId> {
        self.entries
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), true))
            .collect()
    }

    /// One zero tensor per block, for gradient accumulation.
    pub fn zero_grads(&self) -> Vec<Tensor<T>> {
        self.entries
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect()
    }

    /// Overwrites every block with uniform values; used to put networks in a
    /// generic position before gradient checking.
    pub fn randomize(&mut self, lo: f64, hi: f64, rng: &mut Xorshift64Star) {
        for (_, t) in self.entries.iter_mut() {
            *t = Tensor::uniform(t.shape(), lo, hi, rng);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast::<U>()))
                .collect(),
        }
    }
}
