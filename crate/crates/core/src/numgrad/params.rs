use std::collections::HashMap;

use super::Tensor;
use crate::error::{AsdError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named learnable tensors with gradient slots, plus non-trainable buffers
/// (batch-norm running statistics).
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Vec<f64>>,
    index: HashMap<String, ParamId>,
    buffers: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.grads.push(vec![0.0; value.len()]);
        self.values.push(value);
        self.index.insert(name.clone(), id);
        self.names.push(name);
        id
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.buffers.push((name.into(), value));
        self.buffers.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    /// Mutable value and read-only gradient of one parameter.
    pub fn value_and_grad(&mut self, id: ParamId) -> (&mut [f64], &[f64]) {
        (self.values[id.0].data_mut(), &self.grads[id.0])
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn buffer(&self, i: usize) -> &Tensor {
        &self.buffers[i].1
    }

    pub fn buffer_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.buffers[i].1
    }

    pub fn parameter_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// All parameters then all buffers, in insertion order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .cloned()
            .zip(self.values.iter().cloned())
            .chain(self.buffers.iter().cloned())
            .collect()
    }

    /// Overwrites parameters and buffers from a named table; every entry of
    /// this store must be present with a matching shape.
    pub fn load_named(&mut self, table: &[(String, Tensor)]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor> = table.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let fetch = |name: &str, current: &Tensor| -> Result<Tensor> {
            let t = lookup.get(name).ok_or_else(|| AsdError::Format {
                what: "checkpoint",
                reason: format!("missing tensor {name}"),
            })?;
            if t.shape() != current.shape() {
                return Err(AsdError::shape("checkpoint load", current.shape(), t.shape()));
            }
            Ok((*t).clone())
        };
        for i in 0..self.values.len() {
            self.values[i] = fetch(&self.names[i], &self.values[i])?;
        }
        for i in 0..self.buffers.len() {
            self.buffers[i].1 = fetch(&self.buffers[i].0, &self.buffers[i].1)?;
        }
        Ok(())
    }
}
