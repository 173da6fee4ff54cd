use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Freeze/unfreeze unit used by the staged training schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Bert,
    Glu,
    EncDec,
}

#[derive(Clone, Debug)]
pub struct Parameter {
    name: String,
    group: ParamGroup,
    value: Tensor,
    grad: Vec<f64>,
    trainable: bool,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }
}

/// Gradients produced by one backward pass, keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    pub(crate) entries: Vec<(ParamId, Vec<f64>)>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Ordered `(name, tensor)` list; the unit of checkpointing and averaging.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl WeightSet {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    /// First name/shape disagreement with `other`, if any.
    pub fn first_mismatch(&self, other: &WeightSet) -> Option<String> {
        for (i, name) in self.names.iter().enumerate() {
            match other.names.get(i) {
                Some(o) if o == name => {
                    if self.tensors[i].shape() != other.tensors[i].shape() {
                        return Some(name.clone());
                    }
                }
                _ => return Some(name.clone()),
            }
        }
        other.names.get(self.names.len()).cloned()
    }
}

/// Owner of every parameter of one model; names are unique.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, group: ParamGroup, value: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            group,
            grad: vec![0.0; value.numel()],
            value,
            trainable: true,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn set_group_trainable(&mut self, group: ParamGroup, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.trainable = trainable;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds a backward pass's gradients to trainable parameters.
    pub fn accumulate(&mut self, grads: &ParamGrads) {
        for (id, g) in &grads.entries {
            let p = &mut self.params[id.0];
            if !p.trainable {
                continue;
            }
            for (acc, v) in p.grad.iter_mut().zip(g) {
                *acc += v;
            }
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            p.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn weights(&self) -> WeightSet {
        WeightSet {
            names: self.params.iter().map(|p| p.name.clone()).collect(),
            tensors: self.params.iter().map(|p| p.value.clone()).collect(),
        }
    }

    /// Replaces all values from `weights`, which must match names, order and
    /// shapes exactly. The error names the first mismatching parameter.
    pub fn load_weights(&mut self, weights: &WeightSet) -> Result<()> {
        if let Some(name) = self.weights_mismatch(weights) {
            return Err(Error::Checkpoint(format!(
                "parameter mismatch at `{name}`"
            )));
        }
        for (p, t) in self.params.iter_mut().zip(&weights.tensors) {
            p.value = t.clone();
        }
        Ok(())
    }

    fn weights_mismatch(&self, weights: &WeightSet) -> Option<String> {
        for (i, p) in self.params.iter().enumerate() {
            match (weights.names.get(i), weights.tensors.get(i)) {
                (Some(n), Some(t)) if *n == p.name && t.shape() == p.value.shape() => {}
                _ => return Some(p.name.clone()),
            }
        }
        weights.names.get(self.params.len()).cloned()
    }
}
