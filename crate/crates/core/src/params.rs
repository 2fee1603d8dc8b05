// SPDX-License-Identifier: Apache-2.0

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Named trainable tensors. Iteration follows insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<S: Scalar = f32> {
    tensors: IndexMap<String, Tensor<S>>,
}

impl<S: Scalar> Default for ParameterStore<S> {
    fn default() -> Self {
        Self {
            tensors: IndexMap::new(),
        }
    }
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter '{name}'")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.tensors.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.get_index_of(name)
    }

    pub fn by_index(&self, index: usize) -> (&str, &Tensor<S>) {
        let (k, v) = self.tensors.get_index(index).expect("index in range");
        (k.as_str(), v)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor<S>> {
        self.tensors.values_mut()
    }

    /// Total trainable scalar count.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Scalar count per name prefix up to the first `depth` dot-separated parts,
    /// in first-seen order.
    pub fn count_by_prefix(&self, depth: usize) -> Vec<(String, usize)> {
        let mut out: IndexMap<String, usize> = IndexMap::new();
        for (name, t) in &self.tensors {
            let prefix = name.split('.').take(depth).collect::<Vec<_>>().join(".");
            *out.entry(prefix).or_default() += t.numel();
        }
        out.into_iter().collect()
    }

    pub fn cast<T: Scalar>(&self) -> ParameterStore<T> {
        ParameterStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Vec<Tensor<S>> {
        self.tensors.values().map(|t| Tensor::zeros(t.shape())).collect()
    }
}
