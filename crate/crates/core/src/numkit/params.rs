use std::collections::BTreeMap;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    tensors: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Registers every tensor on `graph`; names accepted by `trainable` become
    /// parameters, the rest constants.
    pub fn bind(
        &self,
        graph: &mut Graph,
        trainable: impl Fn(&str) -> bool,
    ) -> BTreeMap<String, Var> {
        self.tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    graph.param(name.clone(), t.clone())
                } else {
                    graph.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect()
    }

    /// Copies every tensor of `other` into `self`, replacing same-named entries.
    pub fn extend(&mut self, other: Params) {
        self.tensors.extend(other.tensors);
    }
}

impl FromIterator<(String, Tensor)> for Params {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}
