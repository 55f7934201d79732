//! SGD with momentum, decoupled learning-rate schedule, and global-norm
//! gradient clipping.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use mtlab_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

/// Learning rate for update `step` of `total`: linear warmup, then the
/// schedule over the remaining updates.
pub fn learning_rate(base: f64, schedule: LrSchedule, warmup: usize, step: usize, total: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::Cosine => {
            let span = total.saturating_sub(warmup).max(1) as f64;
            let t = ((step - warmup) as f64 / span).min(1.0);
            0.5 * base * (1.0 + (PI * t).cos())
        }
    }
}

pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`
/// (no-op when `max_norm <= 0`). Returns the norm before clipping.
pub fn clip_grads(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let f = max_norm / norm;
        for g in grads.values_mut() {
            g.scale(f);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    /// `v = momentum * v + (g + wd * p)`, `p -= lr * v`, applied only to the
    /// parameters present in `grads`.
    pub fn step(&self, params: &mut ParamSet, velocity: &mut ParamSet, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(invalid(format!("non-finite gradient for {name}")));
            }
            let p = params
                .get_mut(name)
                .ok_or_else(|| invalid(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(invalid(format!("gradient shape mismatch for {name}")));
            }
            if !velocity.contains(name) {
                velocity.insert(name.clone(), Tensor::zeros(p.shape()));
            }
            let v = velocity.get_mut(name).expect("inserted above");
            for ((vi, &gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut().iter_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *pi;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }
}
