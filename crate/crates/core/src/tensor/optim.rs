use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Bias-corrected Adam moments for an ordered group of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Real> AdamState<T> {
    /// Zero moments with the standard defaults (0.9, 0.999, 1e-8).
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self::with_betas(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &[Tensor<T>], beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros = |t: &Tensor<T>| vec![T::zero(); t.len()];
        AdamState {
            first_moment: params.iter().map(zeros).collect(),
            second_moment: params.iter().map(zeros).collect(),
            step_count: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    /// One in-place update. `grads[i] == None` is treated as a zero gradient.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<&Tensor<T>>], lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {lr}")));
        }
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} params, {} grads, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.first_moment.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let slot = self.first_moment[i].len();
            if p.len() != slot || g.is_some_and(|g| g.shape() != p.shape()) {
                return Err(Error::shape(
                    "adam_step",
                    format!("parameter {i}: {:?} vs moment length {slot}", p.shape()),
                ));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let bc1 = T::from_f64(1.0 - self.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(t));
        let lr = T::from_f64(lr);
        let eps = T::from_f64(self.epsilon);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(T::zero(), |g| g.data()[j]);
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_max` at `t = 0` down to `lr_min` at `t = period`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub period: u64,
}

impl Default for CosineSchedule {
    fn default() -> Self {
        CosineSchedule {
            lr_max: 1e-3,
            lr_min: 1e-7,
            period: 500_000,
        }
    }
}

impl CosineSchedule {
    pub fn new(lr_max: f64, lr_min: f64, period: u64) -> Result<Self> {
        if !(lr_min <= lr_max) || lr_min < 0.0 || period == 0 {
            return Err(Error::InvalidArgument(format!(
                "cosine schedule needs 0 <= lr_min <= lr_max and period > 0 (got {lr_min}, {lr_max}, {period})"
            )));
        }
        Ok(CosineSchedule {
            lr_max,
            lr_min,
            period,
        })
    }

    pub fn lr_at(&self, t: u64) -> Result<f64> {
        if t > self.period {
            return Err(Error::InvalidArgument(format!(
                "iteration {t} beyond cosine period {}",
                self.period
            )));
        }
        let phase = std::f64::consts::PI * t as f64 / self.period as f64;
        Ok(self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + phase.cos()))
    }
}
