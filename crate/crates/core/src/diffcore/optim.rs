use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{config, numeric, shape, Result};

/// Adam moments and hyperparameters for one flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self::with_betas(len, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step<T: Scalar>(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return shape(format!(
                "optimizer holds {} moments, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return numeric(format!("non-finite gradient at parameter {i}"));
        }
        self.step += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let c1 = 1.0 - b1.powi(self.step.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - b2.powi(self.step.min(i32::MAX as u64) as i32);
        let step_size = self.lr / c1;
        for i in 0..params.len() {
            let g = grads[i].to_f64();
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            if self.m[i] == 0.0 {
                continue;
            }
            let denom = (self.v[i] / c2).sqrt() + self.eps;
            params[i] = T::of(params[i].to_f64() - step_size * self.m[i] / denom);
        }
        Ok(())
    }
}

/// Polyak averaging: `target <- (1 - tau) target + tau online`.
pub fn ema_update<T: Scalar>(target: &mut [T], online: &[T], tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return config(format!("tau must lie in (0, 1], got {tau}"));
    }
    if target.len() != online.len() {
        return shape(format!(
            "ema: {} target vs {} online",
            target.len(),
            online.len()
        ));
    }
    if tau == 1.0 {
        target.copy_from_slice(online);
        return Ok(());
    }
    for (t, &o) in target.iter_mut().zip(online) {
        *t = T::of((1.0 - tau) * t.to_f64() + tau * o.to_f64());
    }
    Ok(())
}
