use serde::{Deserialize, Serialize};

use super::{Graph, NnError, Tensor, Var};

/// Which learned quantity a parameter store holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamOwner {
    Dynamics,
    Mapper,
    Latents,
}

/// Ordered, uniquely named set of tensors belonging to one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    owner: ParamOwner,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new(owner: ParamOwner) -> Self {
        Self {
            owner,
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn owner(&self) -> ParamOwner {
        self.owner
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<usize, NnError> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(NnError::DuplicateParam(name));
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(self.tensors.len() - 1)
    }

    pub fn index_of(&self, name: &str) -> Result<usize, NnError> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NnError> {
        Ok(&self.tensors[self.index_of(name)?])
    }

    pub fn at(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    /// Mutable values of one tensor; its shape cannot change.
    pub fn values_mut(&mut self, idx: usize) -> &mut [f64] {
        self.tensors[idx].data_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor as a trainable leaf, in store order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Registers every tensor as a constant leaf (frozen network).
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.constant(t.clone())).collect()
    }
}
