//! Named parameter tensors with matching gradient accumulators.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// All learnable tensors of a model, keyed by name. Iteration order is the
/// sorted name order, which keeps optimizer updates and checkpoints
/// deterministic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    values: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.values.contains_key(&name) {
            return Err(Error::InvalidInput(format!("duplicate parameter {name}")));
        }
        self.grads
            .insert(name.clone(), Tensor::zeros(value.shape().to_vec()));
        self.values.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.values
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.values
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        self.grads
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor) {
        let g = self
            .grads
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        g.add_assign(delta);
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().fill(0.0);
        }
    }

    /// Sorted (name, value) pairs.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.values.iter()
    }

    /// Sorted names.
    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.values.keys()
    }

    /// Parallel mutable access to one value and its gradient.
    pub fn value_and_grad_mut(&mut self, name: &str) -> (&mut Tensor, &Tensor) {
        let g = self
            .grads
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        let v = self
            .values
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        (v, g)
    }

    pub fn num_tensors(&self) -> usize {
        self.values.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.values().map(|t| t.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grads_mirror_shapes_and_zero() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::matrix(2, 3, vec![1.0; 6]).unwrap()).unwrap();
        assert_eq!(store.grad("w").shape(), &[2, 3]);
        store.accumulate_grad("w", &Tensor::matrix(2, 3, vec![0.5; 6]).unwrap());
        store.accumulate_grad("w", &Tensor::matrix(2, 3, vec![0.25; 6]).unwrap());
        assert_eq!(store.grad("w").data()[0], 0.75);
        store.zero_grads();
        assert_eq!(store.grad("w").data(), &[0.0; 6]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(store.insert("w", Tensor::scalar(2.0)).is_err());
    }
}
