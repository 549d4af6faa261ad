use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, uniquely named collection of parameter tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Registers a new parameter. Panics on duplicate names: model builders
    /// derive names from a fixed layout, so a clash is a programming error.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.iter().any(|n| *n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Copies every parameter whose name starts with `prefix` from `src`.
    /// Returns how many tensors were copied.
    pub fn copy_prefix_from(&mut self, src: &ParamStore<T>, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, value) in src.iter() {
            if !name.starts_with(prefix) {
                continue;
            }
            let id = self
                .find(name)
                .ok_or_else(|| Error::Architecture(name.to_string()))?;
            let dst = &mut self.tensors[id.0];
            if dst.shape() != value.shape() {
                return Err(Error::Architecture(alloc::format!(
                    "{name}: {:?} vs {:?}",
                    dst.shape(),
                    value.shape()
                )));
            }
            *dst = value.clone();
            copied += 1;
        }
        Ok(copied)
    }

    /// Same layout, converted element type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Builds a store from `(name, tensor)` pairs, rejecting duplicates.
    pub fn from_entries(entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut store = Self::new();
        for (name, t) in entries {
            if store.find(&name).is_some() {
                return Err(Error::Format(alloc::format!("duplicate tensor {name}")));
            }
            store.names.push(name);
            store.tensors.push(t);
        }
        Ok(store)
    }
}
