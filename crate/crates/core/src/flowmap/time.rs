use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Ordered time pair `0 <= r <= t <= 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimePair {
    r: f64,
    t: f64,
}

impl TimePair {
    pub fn new(r: f64, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&r) || !(0.0..=1.0).contains(&t) || r > t {
            return domain(format!(
                "time pair requires 0 <= r <= t <= 1, got r={r}, t={t}"
            ));
        }
        Ok(Self { r, t })
    }

    pub fn diagonal(t: f64) -> Result<Self> {
        Self::new(t, t)
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn width(&self) -> f64 {
        self.t - self.r
    }

    /// `w = (1 - frac) r + frac t`.
    pub fn midpoint(&self, frac: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&frac) {
            return domain(format!("midpoint fraction {frac} outside [0, 1]"));
        }
        Ok(((1.0 - frac) * self.r + frac * self.t).clamp(self.r, self.t))
    }
}

/// Diagonal-only warmup followed by a linear widening of the `[r, t]` interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Curriculum {
    pub warmup: u64,
    pub anneal: u64,
}

impl Default for Curriculum {
    fn default() -> Self {
        Self {
            warmup: 5_000,
            anneal: 50_000,
        }
    }
}

impl Curriculum {
    /// Fraction of `t` that `r` may lag behind at `step`, in `[0, 1]`.
    pub fn spread(&self, step: u64) -> f64 {
        if step < self.warmup {
            0.0
        } else if self.anneal == 0 {
            1.0
        } else {
            ((step - self.warmup) as f64 / self.anneal as f64).min(1.0)
        }
    }
}

/// `t ~ U[0,1]`, then `r ~ U[t - spread * t, t]`.
pub fn sample_time_pair<R: Rng + ?Sized>(
    rng: &mut R,
    step: u64,
    curriculum: &Curriculum,
) -> TimePair {
    let t: f64 = rng.random();
    let spread = curriculum.spread(step);
    if spread == 0.0 {
        return TimePair { r: t, t };
    }
    let u: f64 = rng.random();
    let r = (t - spread * t * u).clamp(0.0, t);
    TimePair { r, t }
}
