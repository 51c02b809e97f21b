//! Flow-map training objectives.
//!
//! Every objective is a regression `mean_i |pred_i(theta) - sg(target_i)|^2`.
//! The target and the regression are exposed separately so the
//! stop-gradient contract can be tested directly.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::policy::{gaussian, interpolate_rows, jump_with};
use super::{sample_time_pair, Curriculum, FlowMapPolicy};
use crate::diffcore::{DenseArray, Scalar, Tangent};
use crate::error::{config, shape, Error, Result};

/// Off-diagonal self-distillation objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Distillation {
    /// Lagrangian: `d/dt X_{r,t}` against the diagonal velocity at the jump.
    #[serde(rename = "LPD")]
    Lpd,
    /// Eulerian: `d/dr X_{r,t}` against the transported diagonal velocity.
    #[serde(rename = "EPD")]
    Epd,
    /// Progressive: two-hop composition against the one-hop jump.
    #[serde(rename = "PPD")]
    Ppd,
}

impl FromStr for Distillation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LPD" => Ok(Self::Lpd),
            "EPD" => Ok(Self::Epd),
            "PPD" => Ok(Self::Ppd),
            other => config(format!(
                "unknown distillation variant '{other}' (expected LPD, EPD or PPD)"
            )),
        }
    }
}

/// Regression objectives available on a [`FlowBatch`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Diag,
    Distill(Distillation),
    /// Average-velocity identity with `a1 - a0` in place of `u_{r,r}`.
    MeanFlow,
    /// Eulerian residual with `a1 - a0` in place of `u_{r,r}` and the
    /// stop-gradient applied to everything except `-u_{r,t}`.
    SubstitutedEpd,
}

/// Training batch: states, interpolant endpoints, a time pair per row and a
/// midpoint fraction per row.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowBatch<T: Scalar = f32> {
    pub states: DenseArray<T>,
    pub a0: DenseArray<T>,
    pub a1: DenseArray<T>,
    pub r: Vec<T>,
    pub t: Vec<T>,
    pub mid: Vec<T>,
}

impl<T: Scalar> FlowBatch<T> {
    pub fn new(
        states: DenseArray<T>,
        a0: DenseArray<T>,
        a1: DenseArray<T>,
        r: Vec<T>,
        t: Vec<T>,
        mid: Vec<T>,
    ) -> Result<Self> {
        let n = states.rows();
        a0.ensure_shape(n, a1.cols(), "noise batch")?;
        a1.ensure_shape(n, a0.cols(), "action batch")?;
        if r.len() != n || t.len() != n || mid.len() != n {
            return shape(format!("batch of {n} rows needs {n} time values"));
        }
        for i in 0..n {
            let (ri, ti, mi) = (r[i].to_f64(), t[i].to_f64(), mid[i].to_f64());
            if !(0.0 <= ri && ri <= ti && ti <= 1.0 && (0.0..=1.0).contains(&mi)) {
                return crate::error::domain(format!(
                    "row {i}: invalid times r={ri}, t={ti}, mid={mi}"
                ));
            }
        }
        Ok(Self {
            states,
            a0,
            a1,
            r,
            t,
            mid,
        })
    }

    /// Fresh noise, one curriculum time pair and one `U[0,1]` midpoint
    /// fraction per data row.
    pub fn sample<R: Rng + ?Sized>(
        rng: &mut R,
        states: DenseArray<T>,
        actions: DenseArray<T>,
        step: u64,
        curriculum: &Curriculum,
    ) -> Result<Self> {
        let n = states.rows();
        let a0 = gaussian(rng, n, actions.cols());
        let mut r = Vec::with_capacity(n);
        let mut t = Vec::with_capacity(n);
        let mut mid = Vec::with_capacity(n);
        for _ in 0..n {
            let p = sample_time_pair(rng, step, curriculum);
            r.push(T::of(p.r()));
            t.push(T::of(p.t()));
            mid.push(T::of(rng.random::<f64>()));
        }
        Self::new(states, a0, actions, r, t, mid)
    }

    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn a_r(&self) -> DenseArray<T> {
        interpolate_rows(&self.a0, &self.a1, &self.r)
    }

    pub fn a_t(&self) -> DenseArray<T> {
        interpolate_rows(&self.a0, &self.a1, &self.t)
    }

    /// Midpoints `w = (1 - mid) r + mid t`, clamped into `[r, t]`.
    pub fn w(&self) -> Vec<T> {
        (0..self.len())
            .map(|i| {
                let w = (T::ONE - self.mid[i]) * self.r[i] + self.mid[i] * self.t[i];
                w.max(self.r[i]).min(self.t[i])
            })
            .collect()
    }

    /// Conditional velocity `a1 - a0`.
    pub fn target_velocity(&self) -> DenseArray<T> {
        self.a1
            .zip_map(&self.a0, |a, b| a - b)
            .expect("same shapes")
    }
}

/// Loss value with its parameter gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad<T> {
    pub value: f64,
    pub grads: Vec<T>,
}

/// `mean_i |pred_i - target_i|^2` and its derivative with respect to `pred`.
fn mse<T: Scalar>(pred: &DenseArray<T>, target: &DenseArray<T>) -> Result<(f64, DenseArray<T>)> {
    if pred.shape() != target.shape() {
        return shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        ));
    }
    let n = pred.rows().max(1) as f64;
    let mut total = 0.0f64;
    let scale = T::of(2.0 / n);
    let mut grad = pred.clone();
    for (g, &y) in grad.as_mut_slice().iter_mut().zip(target.as_slice()) {
        let diff = *g - y;
        total += diff.to_f64() * diff.to_f64();
        *g = scale * diff;
    }
    let value = total / n;
    if !value.is_finite() {
        return crate::error::numeric(format!("loss is not finite ({value})"));
    }
    Ok((value, grad))
}

fn scale_rows<T: Scalar>(a: &DenseArray<T>, s: &[T]) -> DenseArray<T> {
    let mut out = a.clone();
    for i in 0..a.rows() {
        for x in out.row_mut(i) {
            *x *= s[i];
        }
    }
    out
}

fn widths<T: Scalar>(lo: &[T], hi: &[T]) -> Vec<T> {
    lo.iter().zip(hi).map(|(&a, &b)| b - a).collect()
}

/// Tangent array for the `[B, 2]` time block with a one in column `axis`.
fn time_axis<T: Scalar>(rows: usize, axis: usize) -> DenseArray<T> {
    let mut out = DenseArray::zeros(vec![rows, 2]);
    for i in 0..rows {
        out.set(i, axis, T::ONE);
    }
    out
}

/// Input tangent moving only the action block along `v`.
fn action_tangent<T: Scalar>(states: &DenseArray<T>, v: &DenseArray<T>) -> Result<DenseArray<T>> {
    DenseArray::hstack(&[&DenseArray::zeros(states.shape().to_vec()), v])
}

fn jvp_along<T: Scalar>(
    policy: &FlowMapPolicy<T>,
    states: &DenseArray<T>,
    a: &DenseArray<T>,
    r: &[T],
    t: &[T],
    action_dir: Option<&DenseArray<T>>,
    time_dir: Option<usize>,
) -> Result<(DenseArray<T>, DenseArray<T>)> {
    let n = states.rows();
    let inputs = policy.inputs(states, a)?;
    let times = FlowMapPolicy::times(r, t)?;
    let tan_in = match action_dir {
        Some(v) => action_tangent(states, v)?,
        None => DenseArray::zeros(inputs.shape().to_vec()),
    };
    let tan_t = match time_dir {
        Some(axis) => time_axis(n, axis),
        None => DenseArray::zeros(vec![n, 2]),
    };
    policy.net().forward_dual(
        &inputs,
        &times,
        &Tangent {
            inputs: &tan_in,
            times: &tan_t,
        },
    )
}

/// Stop-gradient regression target of `objective` under the current parameters.
pub fn target<T: Scalar>(
    policy: &FlowMapPolicy<T>,
    batch: &FlowBatch<T>,
    objective: Objective,
) -> Result<DenseArray<T>> {
    let s = &batch.states;
    let (r, t) = (&batch.r, &batch.t);
    let target = match objective {
        Objective::Diag => batch.target_velocity(),
        Objective::Distill(Distillation::Lpd) => {
            let a_r = batch.a_r();
            let x = policy.jump(s, &a_r, r, t)?;
            policy.velocity(s, &x, t, t)?
        }
        Objective::Distill(Distillation::Epd) => {
            let a_r = batch.a_r();
            let v = policy.velocity(s, &a_r, r, r)?;
            let (_, jv) = jvp_along(policy, s, &a_r, r, t, Some(&v), None)?;
            // -(v + (t - r) J v)
            let transported = jump_with(&v, &jv, r, t);
            transported.map(|x| -x)
        }
        Objective::Distill(Distillation::Ppd) => policy.jump(s, &batch.a_r(), r, t)?,
        Objective::MeanFlow => {
            let a_r = batch.a_r();
            let v = batch.target_velocity();
            let n = batch.len();
            let inputs = policy.inputs(s, &a_r)?;
            let times = FlowMapPolicy::times(r, t)?;
            let tan_in = action_tangent(s, &v)?;
            let tan_t = time_axis(n, 0);
            let (_, du) = policy.net().forward_dual(
                &inputs,
                &times,
                &Tangent {
                    inputs: &tan_in,
                    times: &tan_t,
                },
            )?;
            // v + (t - r) du/dr
            jump_with(&v, &du, r, t)
        }
        Objective::SubstitutedEpd => {
            let a_r = batch.a_r();
            let v = batch.target_velocity();
            let (_, du_dr) = jvp_along(policy, s, &a_r, r, t, None, Some(0))?;
            let (_, jv) = jvp_along(policy, s, &a_r, r, t, Some(&v), None)?;
            // residual = -u + [(t - r) du_dr + v + (t - r) J v], so the target is minus the bracket.
            let h = widths(r, t);
            let mut out = v.clone();
            for i in 0..out.rows() {
                let d = out.cols();
                for k in 0..d {
                    let idx = i * d + k;
                    out.as_mut_slice()[idx] =
                        -(v.as_slice()[idx] + h[i] * (du_dr.as_slice()[idx] + jv.as_slice()[idx]));
                }
            }
            out
        }
    };
    target.check_finite("regression target")?;
    Ok(target)
}

/// Regression of the differentiable branch of `objective` onto a fixed target.
pub fn regress<T: Scalar>(
    policy: &FlowMapPolicy<T>,
    batch: &FlowBatch<T>,
    objective: Objective,
    target: &DenseArray<T>,
) -> Result<LossGrad<T>> {
    let net = policy.net();
    let s = &batch.states;
    let (r, t) = (&batch.r, &batch.t);
    let n = batch.len();
    let mut grads = vec![T::ZERO; net.num_params()];
    let value = match objective {
        Objective::Diag => {
            let inputs = policy.inputs(s, &batch.a_t())?;
            let times = FlowMapPolicy::times(t, t)?;
            let (out, tape) = net.forward_taped(&inputs, &times, None)?;
            let (value, g) = mse(&out.value, target)?;
            net.backward(&tape, &g, None, &mut grads, false)?;
            value
        }
        Objective::Distill(Distillation::Lpd) | Objective::Distill(Distillation::Epd) => {
            // d/dt X = u + (t - r) du/dt ;  d/dr X = -u + (t - r) du/dr
            let lagrangian = objective == Objective::Distill(Distillation::Lpd);
            let axis = if lagrangian { 1 } else { 0 };
            let inputs = policy.inputs(s, &batch.a_r())?;
            let times = FlowMapPolicy::times(r, t)?;
            let tan_in = DenseArray::zeros(inputs.shape().to_vec());
            let tan_t = time_axis(n, axis);
            let tangent = Tangent {
                inputs: &tan_in,
                times: &tan_t,
            };
            let (out, tape) = net.forward_taped(&inputs, &times, Some(&tangent))?;
            let du = out.tangent.expect("tangent requested");
            let sign = if lagrangian { T::ONE } else { -T::ONE };
            let h = widths(r, t);
            let base = out.value.map(|x| sign * x);
            let pred = jump_with(&base, &du, &vec![T::ZERO; n], &h);
            let (value, g) = mse(&pred, target)?;
            let g_value = g.map(|x| sign * x);
            let g_tangent = scale_rows(&g, &h);
            net.backward(&tape, &g_value, Some(&g_tangent), &mut grads, false)?;
            value
        }
        Objective::Distill(Distillation::Ppd) => {
            let w = batch.w();
            let a_r = batch.a_r();
            let inner_in = policy.inputs(s, &a_r)?;
            let inner_times = FlowMapPolicy::times(r, &w)?;
            let (inner, inner_tape) = net.forward_taped(&inner_in, &inner_times, None)?;
            let y = jump_with(&a_r, &inner.value, r, &w);
            let outer_in = policy.inputs(s, &y)?;
            let outer_times = FlowMapPolicy::times(&w, t)?;
            let (outer, outer_tape) = net.forward_taped(&outer_in, &outer_times, None)?;
            let z = jump_with(&y, &outer.value, &w, t);
            let (value, g) = mse(&z, target)?;
            let gin = net
                .backward(
                    &outer_tape,
                    &scale_rows(&g, &widths(&w, t)),
                    None,
                    &mut grads,
                    true,
                )?
                .expect("input gradient requested");
            let gy = g.zip_map(
                &gin.columns(policy.state_dim(), policy.action_dim()),
                |a, b| a + b,
            )?;
            net.backward(
                &inner_tape,
                &scale_rows(&gy, &widths(r, &w)),
                None,
                &mut grads,
                false,
            )?;
            value
        }
        Objective::MeanFlow | Objective::SubstitutedEpd => {
            let sign = if objective == Objective::MeanFlow {
                T::ONE
            } else {
                -T::ONE
            };
            let inputs = policy.inputs(s, &batch.a_r())?;
            let times = FlowMapPolicy::times(r, t)?;
            let (out, tape) = net.forward_taped(&inputs, &times, None)?;
            let pred = out.value.map(|x| sign * x);
            let (value, g) = mse(&pred, target)?;
            net.backward(&tape, &g.map(|x| sign * x), None, &mut grads, false)?;
            value
        }
    };
    Ok(LossGrad { value, grads })
}

/// Target followed by regression.
pub fn loss<T: Scalar>(
    policy: &FlowMapPolicy<T>,
    batch: &FlowBatch<T>,
    objective: Objective,
) -> Result<LossGrad<T>> {
    let y = target(policy, batch, objective)?;
    regress(policy, batch, objective, &y)
}

/// Diagonal loss plus `lambda` times the chosen self-distillation loss.
pub fn offline_actor_loss<T: Scalar>(
    policy: &FlowMapPolicy<T>,
    batch: &FlowBatch<T>,
    variant: Distillation,
    lambda: f64,
) -> Result<LossGrad<T>> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return config(format!(
            "distillation weight must be non-negative, got {lambda}"
        ));
    }
    let mut total = loss(policy, batch, Objective::Diag)?;
    if lambda > 0.0 {
        let sd = loss(policy, batch, Objective::Distill(variant))?;
        total.value += lambda * sd.value;
        let l = T::of(lambda);
        for (a, b) in total.grads.iter_mut().zip(sd.grads) {
            *a += l * b;
        }
    }
    Ok(total)
}

/// Component values `(diag, distillation)` without gradients.
pub fn loss_components<T: Scalar>(
    policy: &FlowMapPolicy<T>,
    batch: &FlowBatch<T>,
    variant: Distillation,
) -> Result<(f64, f64)> {
    Ok((
        loss(policy, batch, Objective::Diag)?.value,
        loss(policy, batch, Objective::Distill(variant))?.value,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::check::{random_matrix, relative_gap};
    use crate::flowmap::PolicyArch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const ALL: [Objective; 6] = [
        Objective::Diag,
        Objective::Distill(Distillation::Lpd),
        Objective::Distill(Distillation::Epd),
        Objective::Distill(Distillation::Ppd),
        Objective::MeanFlow,
        Objective::SubstitutedEpd,
    ];

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, sd: usize, ad: usize) -> FlowBatch<f64> {
        let states = random_matrix(rng, n, sd, 1.0);
        let a0 = random_matrix(rng, n, ad, 1.0);
        let a1 = random_matrix(rng, n, ad, 0.5);
        let mut r = Vec::new();
        let mut t = Vec::new();
        for _ in 0..n {
            let tt: f64 = rng.random();
            t.push(tt);
            r.push(tt * rng.random::<f64>());
        }
        let mid = (0..n).map(|_| rng.random()).collect();
        FlowBatch::new(states, a0, a1, r, t, mid).unwrap()
    }

    fn random_policy(rng: &mut ChaCha8Rng, sd: usize, ad: usize) -> FlowMapPolicy<f64> {
        let arch = PolicyArch {
            hidden: vec![16, 16],
            time_features: 8,
            max_frequency: 8.0,
        };
        FlowMapPolicy::new(sd, ad, &arch, rng).unwrap()
    }

    /// `W^2 a` row-wise for a `d x d` matrix `w`.
    fn w_squared(w: &[f64], a: &[f64]) -> Vec<f64> {
        let d = a.len();
        let wa: Vec<f64> = (0..d)
            .map(|i| (0..d).map(|j| w[i * d + j] * a[j]).sum())
            .collect();
        (0..d)
            .map(|i| (0..d).map(|j| w[i * d + j] * wa[j]).sum())
            .collect()
    }

    fn linear_oracle(batch: &FlowBatch<f64>, w: &[f64], factor: impl Fn(usize) -> f64) -> f64 {
        let a_r = batch.a_r();
        (0..batch.len())
            .map(|i| {
                let f = factor(i);
                w_squared(w, a_r.row(i))
                    .iter()
                    .map(|x| (f * x).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / batch.len() as f64
    }

    #[test]
    fn diag_loss_zero_and_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = [0.3, -0.4];
        let p = FlowMapPolicy::<f64>::affine(&[0.0; 4], &c, 2).unwrap();
        let mut b = random_batch(&mut rng, 8, 2, 2);
        b.a1 = b.a0.clone();
        assert!((loss(&p, &b, Objective::Diag).unwrap().value - 0.25).abs() < 1e-12);
        for i in 0..b.len() {
            for k in 0..2 {
                let v = b.a0.get(i, k) + c[k];
                b.a1.set(i, k, v);
            }
        }
        assert!(loss(&p, &b, Objective::Diag).unwrap().value < 1e-24);
    }

    #[test]
    fn linear_net_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = [0.5, -0.3, 0.8, 0.2];
        let p = FlowMapPolicy::<f64>::affine(&w, &[0.0, 0.0], 3).unwrap();
        let b = random_batch(&mut rng, 16, 3, 2);
        let widths: Vec<f64> = (0..b.len()).map(|i| b.t[i] - b.r[i]).collect();
        let ws = b.w();
        let want_lpd = linear_oracle(&b, &w, |i| widths[i]);
        let want_ppd = linear_oracle(&b, &w, |i| (b.t[i] - ws[i]) * (ws[i] - b.r[i]));
        let lpd = loss(&p, &b, Objective::Distill(Distillation::Lpd))
            .unwrap()
            .value;
        let epd = loss(&p, &b, Objective::Distill(Distillation::Epd))
            .unwrap()
            .value;
        let ppd = loss(&p, &b, Objective::Distill(Distillation::Ppd))
            .unwrap()
            .value;
        assert!((lpd - want_lpd).abs() < 1e-6, "{lpd} vs {want_lpd}");
        assert!((epd - want_lpd).abs() < 1e-6, "{epd} vs {want_lpd}");
        assert!((ppd - want_ppd).abs() < 1e-6, "{ppd} vs {want_ppd}");
    }

    #[test]
    fn diagonal_pairs_are_self_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_policy(&mut rng, 2, 2);
        let mut b = random_batch(&mut rng, 8, 2, 2);
        b.r = b.t.clone();
        for obj in [Distillation::Lpd, Distillation::Epd, Distillation::Ppd] {
            let v = loss(&p, &b, Objective::Distill(obj)).unwrap().value;
            assert!(v < 1e-20, "{obj:?}: {v}");
        }
    }

    #[test]
    fn ppd_midpoint_endpoints_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_policy(&mut rng, 2, 2);
        let mut b = random_batch(&mut rng, 8, 2, 2);
        for m in [0.0, 1.0] {
            b.mid = vec![m; b.len()];
            assert_eq!(
                loss(&p, &b, Objective::Distill(Distillation::Ppd))
                    .unwrap()
                    .value,
                0.0
            );
        }
    }

    #[test]
    fn gradients_match_differences_with_target_detached() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_policy(&mut rng, 2, 3);
        let b = random_batch(&mut rng, 6, 2, 3);
        let eps = 1e-4;
        for obj in ALL {
            let y = target(&p, &b, obj).unwrap();
            let g = regress(&p, &b, obj, &y).unwrap().grads;
            let mut probe = p.clone();
            let mut full_gap = 0.0f64;
            for i in rand::seq::index::sample(&mut rng, p.net().num_params(), 48) {
                let base = p.net().params()[i];
                probe.net_mut().params_mut()[i] = base + eps;
                let up = regress(&probe, &b, obj, &y).unwrap().value;
                let up_full = loss(&probe, &b, obj).unwrap().value;
                probe.net_mut().params_mut()[i] = base - eps;
                let down = regress(&probe, &b, obj, &y).unwrap().value;
                let down_full = loss(&probe, &b, obj).unwrap().value;
                probe.net_mut().params_mut()[i] = base;
                let fd = (up - down) / (2.0 * eps);
                assert!(
                    relative_gap(g[i], fd) < 1e-5,
                    "{obj:?} param {i}: {} vs {fd}",
                    g[i]
                );
                full_gap = full_gap.max(relative_gap(g[i], (up_full - down_full) / (2.0 * eps)));
            }
            // The undetached loss has a different gradient; the target branch is really cut.
            if obj != Objective::Diag {
                assert!(
                    full_gap > 1e-3,
                    "{obj:?}: target branch seems to carry no parameter dependence"
                );
            }
        }
    }

    #[test]
    fn combined_loss_is_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_policy(&mut rng, 2, 2);
        let b = random_batch(&mut rng, 8, 2, 2);
        let diag = loss(&p, &b, Objective::Diag).unwrap();
        assert_eq!(
            offline_actor_loss(&p, &b, Distillation::Epd, 0.0).unwrap(),
            diag
        );
        let epd = loss(&p, &b, Objective::Distill(Distillation::Epd)).unwrap();
        let both = offline_actor_loss(&p, &b, Distillation::Epd, 1.0).unwrap();
        assert!((both.value - diag.value - epd.value).abs() < 1e-12);
        for ((x, y), z) in both.grads.iter().zip(&diag.grads).zip(&epd.grads) {
            assert!((x - y - z).abs() < 1e-6);
        }
        assert!(offline_actor_loss(&p, &b, Distillation::Epd, -1.0).is_err());
    }

    #[test]
    fn meanflow_gradient_matches_substituted_eulerian() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let p = random_policy(&mut rng, 3, 2);
            let b = random_batch(&mut rng, 16, 3, 2);
            let mf = loss(&p, &b, Objective::MeanFlow).unwrap();
            let ep = loss(&p, &b, Objective::SubstitutedEpd).unwrap();
            assert!((mf.value - ep.value).abs() < 1e-9 * mf.value.max(1.0));
            let dot: f64 = mf.grads.iter().zip(&ep.grads).map(|(a, b)| a * b).sum();
            let na = mf.grads.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nb = ep.grads.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(dot / (na * nb) > 1.0 - 1e-9);
            assert!((na - nb).abs() / na < 1e-9);
        }
    }

    #[test]
    fn exact_velocity_zeroes_substituted_residuals() {
        // For a point target m the exact average velocity from (a_r, r) to t = 1
        // is (m - a_r)/(1 - r) and satisfies u + (t - r) du/dr = v along the path;
        // feed those analytic ingredients into the residual formula.
        let m = [0.4, -0.2];
        let a0 = [1.3, 0.7];
        for &r in &[0.0, 0.3, 0.8] {
            let a_r: Vec<f64> = (0..2).map(|k| (1.0 - r) * a0[k] + r * m[k]).collect();
            let v: Vec<f64> = (0..2).map(|k| m[k] - a0[k]).collect();
            for k in 0..2 {
                let u = (m[k] - a_r[k]) / (1.0 - r);
                // du/dr along the trajectory: du/da * v + du/dr|_a, with du/da = -1/(1-r).
                let du_dr = -v[k] / (1.0 - r) + (m[k] - a_r[k]) / (1.0 - r).powi(2);
                let resid = u - (v[k] + (1.0 - r) * du_dr);
                assert!(resid.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unknown_variant_is_rejected() {
        assert_eq!("epd".parse::<Distillation>().unwrap(), Distillation::Epd);
        assert!(matches!(
            "XPD".parse::<Distillation>(),
            Err(Error::Config(_))
        ));
    }
}
