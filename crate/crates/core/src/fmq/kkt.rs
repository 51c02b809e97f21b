//! Brute-force check of the closed-form trust-region step.
//!
//! For a smooth `Q`, the first-order model of
//! `max_u Q(a_r + (1 - r) u)` subject to `|u - u_ref| <= eta` is
//! `(1 - r) <grad Q(a1), u - u_ref>` with `a1 = a_r + (1 - r) u_ref`. Its
//! maximizer is `u_ref + eta g / |g|`; the oracle compares that against
//! uniform samples on the sphere of radius `eta`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffcore::{no_times, DenseArray, Mlp};
use crate::Result;

/// Scalar function of an action with an exact gradient.
pub trait QModel {
    fn value(&self, a: &[f64]) -> f64;
    fn gradient(&self, a: &[f64]) -> Vec<f64>;
}

/// `Q(a) = c + <b, a> + 1/2 a^T H a` with symmetric `H` (row-major).
#[derive(Clone, Debug)]
pub struct QuadraticQ {
    pub c: f64,
    pub b: Vec<f64>,
    pub h: Vec<f64>,
}

impl QuadraticQ {
    /// `Q(a) = -|a - center|^2`.
    pub fn negative_distance(center: &[f64]) -> Self {
        let d = center.len();
        let mut h = vec![0.0; d * d];
        for i in 0..d {
            h[i * d + i] = -2.0;
        }
        Self {
            c: -center.iter().map(|x| x * x).sum::<f64>(),
            b: center.iter().map(|x| 2.0 * x).collect(),
            h,
        }
    }

    pub fn linear(b: &[f64]) -> Self {
        Self {
            c: 0.0,
            b: b.to_vec(),
            h: vec![0.0; b.len() * b.len()],
        }
    }

    /// Random symmetric quadratic with standard-normal coefficients.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Self {
        let mut h = vec![0.0; d * d];
        for i in 0..d {
            for j in i..d {
                let v: f64 = rng.sample(StandardNormal);
                h[i * d + j] = v;
                h[j * d + i] = v;
            }
        }
        let b = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        Self {
            c: rng.sample(StandardNormal),
            b,
            h,
        }
    }

    fn dim(&self) -> usize {
        self.b.len()
    }
}

impl QModel for QuadraticQ {
    fn value(&self, a: &[f64]) -> f64 {
        let d = self.dim();
        let mut v = self.c;
        for i in 0..d {
            v += self.b[i] * a[i];
            for j in 0..d {
                v += 0.5 * a[i] * self.h[i * d + j] * a[j];
            }
        }
        v
    }

    fn gradient(&self, a: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|i| self.b[i] + (0..d).map(|j| self.h[i * d + j] * a[j]).sum::<f64>())
            .collect()
    }
}

/// Scalar-output network over actions only.
pub struct MlpQ<'a>(pub &'a Mlp<f64>);

impl QModel for MlpQ<'_> {
    fn value(&self, a: &[f64]) -> f64 {
        let x = DenseArray::matrix(1, a.len(), a.to_vec()).expect("row");
        self.0
            .forward(&x, &no_times(1))
            .expect("valid network input")
            .as_slice()[0]
    }

    fn gradient(&self, a: &[f64]) -> Vec<f64> {
        let x = DenseArray::matrix(1, a.len(), a.to_vec()).expect("row");
        let ones = DenseArray::filled(vec![1, 1], 1.0);
        self.0
            .input_gradient(&x, &no_times(1), &ones)
            .expect("valid network input")
            .into_vec()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum KktVerdict {
    Pass {
        /// Smallest `L(u*) - L(u_sample)` over all samples.
        worst_margin: f64,
        /// `| |u* - u_ref| - eta |`.
        radius_error: f64,
        /// Whether `u*` also beat every sample on the exact objective, when
        /// that comparison was requested.
        exact_best: Option<bool>,
    },
    Fail {
        worst_margin: f64,
        radius_error: f64,
    },
    /// Gradient too small for the step direction to be defined.
    Skip,
}

impl KktVerdict {
    pub fn passed(&self) -> bool {
        matches!(self, Self::Pass { .. })
    }
}

/// Closed-form step with `kappa1 = 0`, or `None` for a vanishing gradient.
pub fn closed_form_step(u_ref: &[f64], grad: &[f64], eta: f64) -> Option<Vec<f64>> {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return None;
    }
    Some(
        u_ref
            .iter()
            .zip(grad)
            .map(|(u, g)| u + eta * g / norm)
            .collect(),
    )
}

/// Checks the closed-form step against `samples` uniform points on the
/// `eta`-sphere around `u_ref`. With `exact`, every sample is also scored on
/// the unlinearized objective (informational only).
#[allow(clippy::too_many_arguments)]
pub fn kkt_oracle<Q: QModel, R: Rng + ?Sized>(
    q: &Q,
    u_ref: &[f64],
    a_r: &[f64],
    r: f64,
    eta: f64,
    samples: usize,
    exact: bool,
    rng: &mut R,
) -> Result<KktVerdict> {
    if !(0.0..1.0).contains(&r) || eta <= 0.0 || u_ref.len() != a_r.len() {
        return crate::error::domain(format!(
            "kkt oracle needs r in [0,1), eta > 0 and matching dims (r={r}, eta={eta})"
        ));
    }
    let d = u_ref.len();
    let a1: Vec<f64> = (0..d).map(|i| a_r[i] + (1.0 - r) * u_ref[i]).collect();
    let g = q.gradient(&a1);
    let Some(u_star) = closed_form_step(u_ref, &g, eta) else {
        return Ok(KktVerdict::Skip);
    };
    let lin = |u: &[f64]| (1.0 - r) * (0..d).map(|i| g[i] * (u[i] - u_ref[i])).sum::<f64>();
    let exact_value = |u: &[f64]| {
        let a: Vec<f64> = (0..d).map(|i| a_r[i] + (1.0 - r) * u[i]).collect();
        q.value(&a)
    };
    let best = lin(&u_star);
    let best_exact = exact_value(&u_star);
    let radius = u_star
        .iter()
        .zip(u_ref)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let radius_error = (radius - eta).abs();
    let mut worst_margin = f64::INFINITY;
    let mut exact_best = exact;
    let mut z = vec![0.0; d];
    let mut u = vec![0.0; d];
    for _ in 0..samples {
        let mut norm = 0.0f64;
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
            norm += *zi * *zi;
        }
        let norm = norm.sqrt();
        if norm == 0.0 {
            continue;
        }
        for i in 0..d {
            u[i] = u_ref[i] + eta * z[i] / norm;
        }
        worst_margin = worst_margin.min(best - lin(&u));
        if exact_best && exact_value(&u) > best_exact + 1e-9 {
            exact_best = false;
        }
    }
    Ok(if worst_margin >= -1e-9 && radius_error <= 1e-9 {
        KktVerdict::Pass {
            worst_margin,
            radius_error,
            exact_best: exact.then_some(exact_best),
        }
    } else {
        KktVerdict::Fail {
            worst_margin,
            radius_error,
        }
    })
}
