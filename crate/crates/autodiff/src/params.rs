use std::collections::BTreeMap;

use crate::error::{AutodiffError, Result};
use crate::float::Float;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Tape handles for every parameter of a [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn extend(&mut self, other: ParamStore<T>) {
        self.tensors.extend(other.tensors);
    }

    /// Copies every tensor whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Pushes every tensor onto `tape`; `trainable` decides param vs constant.
    pub fn bind_with(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let var = if trainable(name) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        self.bind_with(tape, |_| true)
    }

    /// Collects gradients for every bound parameter that received one.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        bound
            .iter()
            .filter_map(|(name, var)| grads.take(var).map(|g| (name.to_string(), g)))
            .collect()
    }
}
