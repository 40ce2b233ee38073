use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{HintError, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
///
/// Insertion order is the canonical order used by checkpoints, optimizer state
/// and gradient reduction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(HintError::Config(format!("duplicate parameter name {name}")));
        }
        tensor.set_requires_grad(true);
        let id = ParamId(self.tensors.len());
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total scalar count over every parameter.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Scalar count over the parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, t)| t.numel())
            .sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Copies gradient sums into each tensor's grad buffer.
    pub fn accumulate(&mut self, grads: &ParamGrads) {
        for (t, g) in self.tensors.iter_mut().zip(&grads.slots) {
            if let Some(g) = g {
                t.accumulate_grad(g);
            }
        }
    }

    /// Replace parameter values in place (shapes must match).
    pub fn set_data(&mut self, id: ParamId, data: &[f64]) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if t.numel() != data.len() {
            return Err(HintError::Shape(format!(
                "parameter {} has {} elements, got {}",
                self.names[id.0],
                t.numel(),
                data.len()
            )));
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }
}

/// Per-parameter gradient sums, indexed by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct ParamGrads {
    slots: Vec<Option<Vec<f64>>>,
}

impl ParamGrads {
    pub fn new(num_params: usize) -> Self {
        Self {
            slots: vec![None; num_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }

    pub fn add(&mut self, id: ParamId, grad: &[f64]) {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        match &mut self.slots[id.0] {
            Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, g)| *a += g),
            slot @ None => *slot = Some(grad.to_vec()),
        }
    }

    /// Fold another set of gradients into this one.
    pub fn merge(&mut self, other: &ParamGrads) {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }
}
