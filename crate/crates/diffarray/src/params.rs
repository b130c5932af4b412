use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{ArrayError, Result};
use crate::graph::Graph;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
    pub grad: Tensor<T>,
}

/// Named trainable tensors plus their gradient accumulators, in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(ArrayError::Config(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.entries.len());
        let grad = Tensor::zeros(value.shape().to_vec());
        self.entries.push(ParamEntry {
            name: name.clone(),
            value: Arc::new(value),
            grad,
        });
        self.index.insert(name, id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Arc<Tensor<T>> {
        &self.entries[id.0].value
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.entries[id.0].value.as_ref())
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(ArrayError::Shape {
                op: "param_set",
                lhs: entry.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        entry.value = Arc::new(value);
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].grad
    }

    pub fn split_mut(&mut self, id: ParamId) -> (&mut Tensor<T>, &Tensor<T>) {
        let entry = &mut self.entries[id.0];
        (Arc::make_mut(&mut entry.value), &entry.grad)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for entry in &mut self.entries {
            entry.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds the gradients of every parameter leaf in `graph` into the accumulators.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>) {
        for (id, grad) in graph.param_grads() {
            let acc = self.entries[id.0].grad.data_mut();
            for (a, g) in acc.iter_mut().zip(grad.data()) {
                *a += *g;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}
