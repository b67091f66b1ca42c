//! Adam and the warm-up / inverse-square-root learning rate.

use serde::{Deserialize, Serialize};

use super::tensor::Matrix;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
}

impl LrSchedule {
    /// `peak * min(t / W, sqrt(W / t))` for `t >= 1`.
    pub fn at(&self, t: u64) -> f64 {
        lr_schedule(t, self.warmup_steps, self.peak)
    }
}

pub fn lr_schedule(t: u64, warmup: u64, peak: f64) -> f64 {
    let t = t.max(1) as f64;
    let w = warmup.max(1) as f64;
    peak * (t / w).min((w / t).sqrt())
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(shapes: &[Matrix]) -> Self {
        Self {
            m: shapes.iter().map(Matrix::zeros_like).collect(),
            v: shapes.iter().map(Matrix::zeros_like).collect(),
            t: 0,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix], lr: f64) -> Result<()> {
        if grads.len() != params.len() || grads.iter().zip(params.iter()).any(|(g, p)| g.shape() != p.shape()) {
            return Err(Error::Argument("gradient shapes do not match parameters".into()));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(pos) = g.data.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient tensor {i} entry {pos} is {} at update {}",
                    g.data[pos],
                    self.t + 1
                )));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m.data[j] = BETA1 * m.data[j] + (1.0 - BETA1) * gj;
                v.data[j] = BETA2 * v.data[j] + (1.0 - BETA2) * gj * gj;
                let m_hat = m.data[j] / bc1;
                let v_hat = v.data[j] / bc2;
                p.data[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}
