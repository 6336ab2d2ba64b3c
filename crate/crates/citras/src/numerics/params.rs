//! Named parameter collection with per-parameter gradient accumulators.

use std::collections::HashMap;

use crate::error::{CitrasError, Result};
use crate::numerics::tensor::Tensor;

pub type ParamId = usize;

struct Entry {
    name: String,
    value: Tensor,
    grad: Tensor,
    touched: bool,
}

/// Parameters in stable registration order. Gradients accumulate across
/// `add_grad` calls until `zero_grads` resets them; the `touched` flag lets
/// the optimizer reject parameters that never entered a backward pass.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(CitrasError::Contract(format!(
                "parameter {name} registered twice"
            )));
        }
        let id = self.entries.len();
        let grad = Tensor::zeros(value.shape().to_vec());
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            grad,
            touched: false,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id].grad
    }

    pub fn touched(&self, id: ParamId) -> bool {
        self.entries[id].touched
    }

    /// Total number of scalar parameter entries.
    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let entry = &mut self.entries[id];
        if entry.value.shape() != value.shape() {
            return Err(CitrasError::Dimension {
                op: "set_value",
                lhs: entry.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        entry.value = value;
        Ok(())
    }

    pub fn nudge(&mut self, id: ParamId, index: usize, delta: f64) {
        self.entries[id].value.data_mut()[index] += delta;
    }

    pub fn set_scalar(&mut self, id: ParamId, index: usize, value: f64) {
        self.entries[id].value.data_mut()[index] = value;
    }

    pub fn add_grad(&mut self, id: ParamId, grad: &Tensor) -> Result<()> {
        let entry = &mut self.entries[id];
        if entry.grad.shape() != grad.shape() {
            return Err(CitrasError::Dimension {
                op: "add_grad",
                lhs: entry.grad.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        for (dst, &src) in entry.grad.data_mut().iter_mut().zip(grad.data()) {
            *dst += src;
        }
        entry.touched = true;
        Ok(())
    }

    /// Scales every accumulated gradient, e.g. to average over a batch.
    pub fn scale_grads(&mut self, factor: f64) {
        for entry in &mut self.entries {
            for v in entry.grad.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for entry in &mut self.entries {
            for v in entry.grad.data_mut() {
                *v = 0.0;
            }
            entry.touched = false;
        }
    }

    pub fn values_snapshot(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn restore_snapshot(&mut self, snapshot: &[Tensor]) -> Result<()> {
        if snapshot.len() != self.entries.len() {
            return Err(CitrasError::Contract(format!(
                "snapshot holds {} parameters, store holds {}",
                snapshot.len(),
                self.entries.len()
            )));
        }
        for (entry, value) in self.entries.iter_mut().zip(snapshot) {
            if entry.value.shape() != value.shape() {
                return Err(CitrasError::Dimension {
                    op: "restore_snapshot",
                    lhs: entry.value.shape().to_vec(),
                    rhs: value.shape().to_vec(),
                });
            }
            entry.value = value.clone();
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(id, e)| (id, e.name.as_str(), &e.value))
    }
}
