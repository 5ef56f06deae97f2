use std::collections::BTreeMap;

use super::{NumericsError, Result, Tensor};

/// A learnable tensor and its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named parameters, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(NumericsError::DuplicateParam(name));
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        self.entries.insert(name, Param { value, grad });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.grad)
    }

    /// Replaces a parameter's value; the new value must keep the shape.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "set_value",
                left: p.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub fn grad_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|p| &mut p.grad)
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))?;
        if p.grad.shape() != grad.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "accumulate_grad",
                left: p.grad.shape().to_vec(),
                right: grad.shape().to_vec(),
            });
        }
        p.grad.add_assign(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }
}
