use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{ParamStore, Tensor, WeightSet};

/// Linear warmup from `floor` to `peak`, then inverse square-root decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warmup: u64,
    pub peak: f64,
    pub floor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            warmup: 4000,
            peak: 5e-4,
            floor: 1e-7,
        }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step == 0 {
            return Err(Error::invalid("learning rate is defined from step 1"));
        }
        if self.warmup == 0 {
            return Err(Error::invalid("warmup must be at least one step"));
        }
        if step < self.warmup {
            Ok(self.floor + (self.peak - self.floor) * (step as f64 / self.warmup as f64))
        } else {
            Ok(self.peak * (self.warmup as f64).sqrt() / (step as f64).sqrt())
        }
    }
}

/// Adam with bias correction. Moments are allocated lazily per parameter
/// and only for parameters that are trainable when a step is taken.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one update from the gradients accumulated in `store`.
    /// A non-finite gradient aborts before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        let ids: Vec<_> = store.ids().filter(|&id| store.get(id).trainable()).collect();
        for &id in &ids {
            let p = store.get(id);
            if let Some(i) = p.grad().iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of `{}` at entry {i} is {}",
                    p.name(),
                    p.grad()[i]
                )));
            }
        }
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in ids {
            let n = store.value(id).numel();
            let grad = store.get(id).grad().to_vec();
            let m = self.first[id.index()].get_or_insert_with(|| vec![0.0; n]);
            let v = self.second[id.index()].get_or_insert_with(|| vec![0.0; n]);
            let w = store.value_mut(id).data_mut();
            for k in 0..n {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * grad[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * grad[k] * grad[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                w[k] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn first_moment(&self, index: usize) -> Option<&[f64]> {
        self.first.get(index)?.as_deref()
    }

    pub fn second_moment(&self, index: usize) -> Option<&[f64]> {
        self.second.get(index)?.as_deref()
    }

    /// Moments as named records (`adam.m.<param>`, `adam.v.<param>`).
    pub fn to_records(&self, store: &ParamStore) -> WeightSet {
        let mut ws = WeightSet::default();
        for (id, p) in store.iter() {
            let shape = p.value().shape().to_vec();
            for (tag, moments) in [("m", &self.first), ("v", &self.second)] {
                if let Some(Some(data)) = moments.get(id.index()) {
                    ws.names.push(format!("adam.{tag}.{}", p.name()));
                    ws.tensors.push(Tensor::new(shape.clone(), data.clone()).expect("moment shape"));
                }
            }
        }
        ws
    }

    pub fn from_records(store: &ParamStore, step: u64, records: &WeightSet) -> Result<Self> {
        let mut state = AdamState {
            step,
            first: vec![None; store.len()],
            second: vec![None; store.len()],
            ..Self::default()
        };
        for (name, t) in records.names.iter().zip(&records.tensors) {
            let (tag, pname) = name
                .strip_prefix("adam.")
                .and_then(|r| r.split_once('.'))
                .ok_or_else(|| Error::Checkpoint(format!("unexpected optimizer record `{name}`")))?;
            let id = store
                .id(pname)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer record for unknown parameter `{pname}`")))?;
            if store.value(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!("optimizer record `{name}` has the wrong shape")));
            }
            let slot = match tag {
                "m" => &mut state.first,
                "v" => &mut state.second,
                _ => return Err(Error::Checkpoint(format!("unexpected optimizer record `{name}`"))),
            };
            slot[id.index()] = Some(t.data().to_vec());
        }
        Ok(state)
    }
}
