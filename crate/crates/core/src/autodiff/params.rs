use std::collections::HashMap;

use crate::autodiff::{GraphError, Tensor};
use crate::scalar::Scalar;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named learnable tensors plus their accumulated gradients.
///
/// Names are unique and shapes never change after registration.
#[derive(Debug, Clone)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
    grads: Vec<Vec<S>>,
    by_name: HashMap<String, ParamId>,
    step: u64,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            by_name: HashMap::new(),
            step: 0,
        }
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        value: Tensor<S>,
    ) -> Result<ParamId, GraphError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(GraphError::DuplicateParam(name));
        }
        let id = ParamId(self.values.len());
        self.grads.push(vec![S::zero(); value.len()]);
        self.values.push(value);
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [S] {
        self.values[id.0].data_mut()
    }

    /// Overwrites a parameter, keeping its registered shape.
    pub fn set(&mut self, id: ParamId, data: &[S]) -> Result<(), GraphError> {
        let slot = self.values[id.0].data_mut();
        if slot.len() != data.len() {
            return Err(GraphError::ShapeMismatch {
                op: "param set",
                detail: format!(
                    "{} expects {} values, got {}",
                    self.names[id.0],
                    slot.len(),
                    data.len()
                ),
            });
        }
        slot.copy_from_slice(data);
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &[S] {
        &self.grads[id.0]
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut [S] {
        &mut self.grads[id.0]
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x = S::zero());
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn bump_step(&mut self) {
        self.step += 1;
    }

    /// Copies every value from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<S>) -> Result<(), GraphError> {
        if self.names != other.names {
            return Err(GraphError::ShapeMismatch {
                op: "param copy",
                detail: "parameter layouts differ".into(),
            });
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| (ParamId(i), self.names[i].as_str(), v))
    }
}
