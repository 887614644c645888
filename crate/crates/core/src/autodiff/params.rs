use std::ops::Index;

use crate::error::{Error, Result};
use crate::real::Real;

use super::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
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

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a trainable leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> ParamVars {
        ParamVars(self.tensors.iter().map(|t| tape.leaf(t.clone())).collect())
    }

    /// Registers every parameter as a constant, for passes without backward.
    pub fn bind_constants(&self, tape: &mut Tape<T>) -> ParamVars {
        ParamVars(self.tensors.iter().map(|t| tape.constant(t.clone())).collect())
    }

    /// Replaces all values, keeping names; shapes must match.
    pub fn load(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(Error::DimensionMismatch {
                context: "ParamStore::load",
                expected: self.tensors.len(),
                found: values.len(),
            });
        }
        for (cur, new) in self.tensors.iter().zip(&values) {
            if cur.shape() != new.shape() {
                return Err(Error::ShapeMismatch {
                    context: "ParamStore::load",
                    left: cur.shape(),
                    right: new.shape(),
                });
            }
        }
        self.tensors = values;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Tape handles for every parameter of a store, indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Per-parameter gradients, zero where a parameter was unused.
    pub fn grads<T: Real>(&self, tape: &Tape<T>, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.0
            .iter()
            .map(|&v| grads.get_or_zeros(v, tape.shape(v)))
            .collect()
    }
}

impl Index<ParamId> for ParamVars {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}
