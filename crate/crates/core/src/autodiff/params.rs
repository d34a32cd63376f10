use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.names.push(name.into());
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.values
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Copies every tensor onto `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.values.iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect()
    }

    /// Gradients of bound leaves after a backward pass, zeros where none
    /// arrived.
    pub fn grads(tape: &Tape, vars: &[Var]) -> Vec<Tensor> {
        vars.iter().map(|&v| tape.grad_or_zeros(v)).collect()
    }

    /// Replaces values by name from `entries`; every parameter must be
    /// present with an identical shape.
    pub fn load_from(&mut self, entries: &[(String, Tensor)], prefix: &str) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let key = format!("{prefix}{name}");
            let found = entries
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{key}`")))?;
            if found.1.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{key}` has shape {:?}, expected {:?}",
                    found.1.shape(),
                    value.shape()
                )));
            }
            *value = found.1.clone();
        }
        Ok(())
    }
}
