use super::tensor::Tensor;
use crate::{Error, Result, Scalar};
use std::collections::BTreeMap;

struct Entry<S> {
    value: Tensor<S>,
    grad: Tensor<S>,
}

/// Named parameter tensors with paired gradient accumulators and a scalar
/// learning rate. Iteration order is the name order, so reductions and
/// serialization are deterministic.
pub struct ParameterStore<S> {
    entries: BTreeMap<String, Entry<S>>,
    learning_rate: S,
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new(learning_rate: S) -> Self {
        Self {
            entries: BTreeMap::new(),
            learning_rate,
        }
    }

    pub fn learning_rate(&self) -> S {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: S) {
        self.learning_rate = lr;
    }

    pub fn insert(&mut self, name: &str, value: Tensor<S>) {
        let grad = Tensor::zeros(value.shape());
        self.entries.insert(name.to_string(), Entry { value, grad });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor<S>> {
        self.entries
            .get(name)
            .map(|e| &e.grad)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn set(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if entry.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "param_set",
                left: entry.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        entry.value = value;
        Ok(())
    }

    /// Add a gradient contribution to the accumulator.
    pub fn accumulate(&mut self, name: &str, grad: &Tensor<S>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if entry.grad.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                op: "param_accumulate",
                left: entry.grad.shape().to_vec(),
                right: grad.shape().to_vec(),
            });
        }
        entry.grad = entry.grad.add(grad)?;
        Ok(())
    }

    /// Scale all accumulators, e.g. to turn a minibatch sum into a mean.
    pub fn scale_grads(&mut self, factor: S) -> Result<()> {
        for entry in self.entries.values_mut() {
            entry.grad = entry.grad.scale(factor)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            entry.grad = Tensor::zeros(entry.value.shape());
        }
    }

    /// `p <- p - lr * grad` for every parameter. Gradients are left intact
    /// until explicitly zeroed.
    pub fn sgd_step(&mut self) -> Result<()> {
        let lr = self.learning_rate;
        for entry in self.entries.values_mut() {
            let step = entry.grad.scale(-lr)?;
            entry.value = entry.value.add(&step)?;
        }
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
