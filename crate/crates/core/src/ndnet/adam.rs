use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScaError};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

/// Adam optimizer with bias correction; moments are keyed by parameter name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState::new(3e-4)
    }
}

/// One named parameter buffer and its gradient.
pub struct ParamSlot<'a> {
    pub name: String,
    pub value: &'a mut [f64],
    pub grad: &'a [f64],
}

impl<'a> ParamSlot<'a> {
    pub fn new(name: impl Into<String>, value: &'a mut [f64], grad: &'a [f64]) -> Self {
        ParamSlot {
            name: name.into(),
            value,
            grad,
        }
    }
}

/// Pairs named parameters with named gradients, checking that names line up.
pub fn zip_slots<'a>(
    params: Vec<(String, &'a mut [f64])>,
    grads: Vec<(String, &'a [f64])>,
) -> Result<Vec<ParamSlot<'a>>> {
    if params.len() != grads.len() {
        return Err(ScaError::Dimension(format!(
            "{} parameter buffers but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    params
        .into_iter()
        .zip(grads)
        .map(|((pn, value), (gn, grad))| {
            if pn != gn {
                return Err(ScaError::Dimension(format!(
                    "parameter `{pn}` paired with gradient `{gn}`"
                )));
            }
            Ok(ParamSlot {
                name: pn,
                value,
                grad,
            })
        })
        .collect()
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one Adam update to every slot.
    ///
    /// All gradients are validated before any parameter is touched, so a
    /// non-finite gradient leaves the parameters and moments unchanged.
    pub fn step(&mut self, slots: &mut [ParamSlot<'_>]) -> Result<()> {
        for s in slots.iter() {
            if s.value.len() != s.grad.len() {
                return Err(ScaError::Dimension(format!(
                    "parameter `{}` has {} entries but gradient has {}",
                    s.name,
                    s.value.len(),
                    s.grad.len()
                )));
            }
            if let Some(i) = s.grad.iter().position(|g| !g.is_finite()) {
                return Err(ScaError::Numeric(format!(
                    "non-finite gradient for parameter `{}` at index {i}",
                    s.name
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for s in slots.iter_mut() {
            let m = self
                .moments
                .entry(s.name.clone())
                .or_insert_with(|| Moments {
                    first: vec![0.0; s.grad.len()],
                    second: vec![0.0; s.grad.len()],
                });
            if m.first.len() != s.grad.len() {
                return Err(ScaError::Dimension(format!(
                    "moment buffer for `{}` has the wrong length",
                    s.name
                )));
            }
            for i in 0..s.grad.len() {
                let g = s.grad[i];
                m.first[i] = self.beta1 * m.first[i] + (1.0 - self.beta1) * g;
                m.second[i] = self.beta2 * m.second[i] + (1.0 - self.beta2) * g * g;
                let mhat = m.first[i] / c1;
                let vhat = m.second[i] / c2;
                s.value[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
