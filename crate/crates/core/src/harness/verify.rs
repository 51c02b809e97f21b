//! Self-check suites shared by the `verify` command and the test targets.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::consistency::{energy_distance, median, sample_semigroup_gaps};
use crate::diffcore::check::{input_gradient, jvp, parameter_gradient, random_matrix, CheckReport};
use crate::diffcore::{no_times, DenseArray, Mlp, MlpSpec, NormPlacement, Tangent};
use crate::flowmap::{gaussian, loss, FlowBatch, FlowMapPolicy, Objective, PolicyArch};
use crate::fmq::{kkt_oracle, KktVerdict, MlpQ, QuadraticQ};
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: String,
    pub passed: usize,
    pub checked: usize,
    pub skipped: usize,
    /// Headline number: pass rate, worst gap, median or largest distance.
    pub statistic: f64,
    pub success: bool,
    pub detail: String,
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.success { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}: {}", self.name, self.detail)
    }
}

/// Closed-form trust-region step against `samples` sphere samples on
/// `instances` random problems (quadratic or small-MLP `Q`, `d` cycling
/// through 2, 8, 16). Passes when at least 99% of non-degenerate instances do.
pub fn kkt_suite(instances: usize, samples: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut passed, mut skipped, mut worst_margin, mut worst_radius) =
        (0, 0, f64::INFINITY, 0.0f64);
    for i in 0..instances {
        let d = [2, 8, 16][i % 3];
        let u_ref: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let a_r: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let r = rng.random_range(0.0..1.0);
        let eta = rng.random_range(0.1..=1.0);
        let verdict = if (i / 3) % 2 == 0 {
            let q = QuadraticQ::random(&mut rng, d);
            kkt_oracle(&q, &u_ref, &a_r, r, eta, samples, false, &mut rng)?
        } else {
            let spec = MlpSpec {
                input_width: d,
                time_axes: 0,
                time_features: 0,
                max_frequency: 1.0,
                hidden: vec![16],
                output_width: 1,
                layer_norm: None,
            };
            let net = Mlp::<f64>::new(spec, &mut rng)?;
            kkt_oracle(&MlpQ(&net), &u_ref, &a_r, r, eta, samples, false, &mut rng)?
        };
        match verdict {
            KktVerdict::Pass {
                worst_margin: m,
                radius_error,
                ..
            } => {
                passed += 1;
                worst_margin = worst_margin.min(m);
                worst_radius = worst_radius.max(radius_error);
            }
            KktVerdict::Fail {
                worst_margin: m,
                radius_error,
            } => {
                worst_margin = worst_margin.min(m);
                worst_radius = worst_radius.max(radius_error);
            }
            KktVerdict::Skip => skipped += 1,
        }
    }
    let checked = instances - skipped;
    let rate = passed as f64 / checked.max(1) as f64;
    Ok(SuiteReport {
        name: "trust-region KKT".into(),
        passed,
        checked,
        skipped,
        statistic: rate,
        success: checked > 0 && rate >= 0.99,
        detail: format!(
            "{passed}/{checked} instances ({skipped} skipped), {samples} sphere samples each, \
             worst margin {worst_margin:.3e}, worst radius error {worst_radius:.3e}"
        ),
    })
}

/// Network architectures exercised by the derivative oracles: the policy
/// layout (two embedded time axes) and critic layouts with and without
/// LayerNorm.
fn oracle_specs() -> Vec<(&'static str, MlpSpec)> {
    let policy = FlowMapPolicy::<f64>::spec_for(
        3,
        2,
        &PolicyArch {
            hidden: vec![16, 16],
            time_features: 8,
            max_frequency: 8.0,
        },
    );
    let critic = |norm| MlpSpec {
        input_width: 5,
        time_axes: 0,
        time_features: 0,
        max_frequency: 1.0,
        hidden: vec![16, 16],
        output_width: 1,
        layer_norm: norm,
    };
    vec![
        ("policy", policy),
        ("critic", critic(None)),
        (
            "critic/pre-norm",
            critic(Some(NormPlacement::PreActivation)),
        ),
        (
            "critic/post-norm",
            critic(Some(NormPlacement::PostActivation)),
        ),
    ]
}

/// Parameter gradients, gradients through the JVP, JVPs and input gradients
/// of every network layout against central differences (`eps = 1e-3`,
/// relative tolerance `1e-3`, 64 coordinates per check).
pub fn autodiff_suite(seed: u64) -> Result<(SuiteReport, Vec<(String, CheckReport)>)> {
    const COORDS: usize = 64;
    const EPS: f64 = 1e-3;
    const RTOL: f64 = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for (label, spec) in oracle_specs() {
        let rows = 6;
        let net = Mlp::<f64>::new(spec.clone(), &mut rng)?;
        let x = random_matrix(&mut rng, rows, spec.input_width, 1.0);
        let t = if spec.time_axes == 0 {
            no_times(rows)
        } else {
            DenseArray::matrix(
                rows,
                spec.time_axes,
                (0..rows * spec.time_axes)
                    .map(|_| rng.random_range(0.0..1.0))
                    .collect(),
            )?
        };
        reports.push((
            label.to_string(),
            parameter_gradient(&net, &x, &t, None, COORDS, EPS, RTOL, &mut rng)?,
        ));
        reports.push((
            label.to_string(),
            input_gradient(&net, &x, &t, COORDS, EPS, RTOL, &mut rng)?,
        ));
        if spec.time_axes > 0 {
            let v = random_matrix(&mut rng, rows, spec.input_width, 1.0);
            let vt = random_matrix(&mut rng, rows, spec.time_axes, 1.0);
            let tan = Tangent {
                inputs: &v,
                times: &vt,
            };
            reports.push((
                label.to_string(),
                parameter_gradient(&net, &x, &t, Some(&tan), COORDS, EPS, RTOL, &mut rng)?,
            ));
            reports.push((
                label.to_string(),
                jvp(&net, &x, &t, COORDS, EPS, RTOL, &mut rng)?,
            ));
        }
    }
    let checked: usize = reports.iter().map(|(_, r)| r.checked).sum();
    let failures: usize = reports.iter().map(|(_, r)| r.failures).sum();
    let worst = reports.iter().map(|(_, r)| r.worst_gap).fold(0.0, f64::max);
    let suite = SuiteReport {
        name: "autodiff oracles".into(),
        passed: checked - failures,
        checked,
        skipped: 0,
        statistic: worst,
        success: failures == 0 && reports.iter().all(|(_, r)| r.passed()),
        detail: format!(
            "{}/{checked} coordinates over {} checks, worst relative gap {worst:.3e}",
            checked - failures,
            reports.len()
        ),
    };
    Ok((suite, reports))
}

/// Gradient of the average-velocity identity loss against the Eulerian loss
/// with the true velocity substituted, on `pairs` random (batch, parameter)
/// draws. Requires cosine `>= 1 - 1e-5` and relative norm gap `<= 1e-4`.
pub fn equivalence_suite(pairs: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = PolicyArch {
        hidden: vec![16, 16],
        time_features: 8,
        max_frequency: 8.0,
    };
    let (mut passed, mut worst_cos, mut worst_gap) = (0, 1.0f64, 0.0f64);
    for _ in 0..pairs {
        let policy = FlowMapPolicy::<f64>::new(3, 2, &arch, &mut rng)?;
        let n = 16;
        let states = random_matrix(&mut rng, n, 3, 1.0);
        let a0 = random_matrix(&mut rng, n, 2, 1.0);
        let a1 = random_matrix(&mut rng, n, 2, 0.5);
        let t: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let r: Vec<f64> = t.iter().map(|&ti| ti * rng.random::<f64>()).collect();
        let mid = (0..n).map(|_| rng.random()).collect();
        let batch = FlowBatch::new(states, a0, a1, r, t, mid)?;
        let mf = loss(&policy, &batch, Objective::MeanFlow)?;
        let ep = loss(&policy, &batch, Objective::SubstitutedEpd)?;
        let dot: f64 = mf.grads.iter().zip(&ep.grads).map(|(a, b)| a * b).sum();
        let na = mf.grads.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb = ep.grads.iter().map(|b| b * b).sum::<f64>().sqrt();
        let cos = if na == 0.0 && nb == 0.0 {
            1.0
        } else {
            dot / (na * nb)
        };
        let gap = (na - nb).abs() / na.max(nb).max(f64::MIN_POSITIVE);
        worst_cos = worst_cos.min(cos);
        worst_gap = worst_gap.max(gap);
        if cos >= 1.0 - 1e-5 && gap <= 1e-4 {
            passed += 1;
        }
    }
    Ok(SuiteReport {
        name: "average-velocity / Eulerian equivalence".into(),
        passed,
        checked: pairs,
        skipped: 0,
        statistic: 1.0 - worst_cos,
        success: pairs > 0 && passed == pairs,
        detail: format!(
            "{passed}/{pairs} pairs, worst cosine 1 - {:.3e}, worst norm gap {worst_gap:.3e}",
            1.0 - worst_cos
        ),
    })
}

/// Median two-hop vs one-hop gap of a trained policy over `count` held-out
/// triples; passes at `<= threshold`.
pub fn semigroup_check(
    policy: &FlowMapPolicy<f32>,
    states: &DenseArray<f32>,
    count: usize,
    threshold: f64,
    seed: u64,
) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaps = sample_semigroup_gaps(policy, states, count, &mut rng)?;
    let m = median(&gaps);
    let passed = gaps.iter().filter(|&&g| g <= threshold).count();
    Ok(SuiteReport {
        name: "semigroup".into(),
        passed,
        checked: count,
        skipped: 0,
        statistic: m,
        success: m <= threshold,
        detail: format!("median gap {m:.4} over {count} triples (threshold {threshold})"),
    })
}

/// Energy distance between `samples` one-step and `samples` Euler samples at
/// each of `states`; passes when the largest is `<= threshold`.
pub fn sampler_consistency_check(
    policy: &FlowMapPolicy<f32>,
    states: &[Vec<f32>],
    samples: usize,
    euler_steps: usize,
    threshold: f64,
    seed: u64,
) -> Result<(SuiteReport, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut distances = Vec::with_capacity(states.len());
    for s in states {
        let rows = DenseArray::matrix(1, s.len(), s.clone())?.repeat_rows(samples);
        let one =
            policy.sample_one_step(&rows, &gaussian(&mut rng, samples, policy.action_dim()))?;
        let many = policy.sample_euler(
            &rows,
            &gaussian(&mut rng, samples, policy.action_dim()),
            euler_steps,
        )?;
        distances.push(energy_distance(&one, &many)?);
    }
    let worst = distances.iter().copied().fold(0.0, f64::max);
    let passed = distances.iter().filter(|&&d| d <= threshold).count();
    let report = SuiteReport {
        name: "one-step vs Euler".into(),
        passed,
        checked: states.len(),
        skipped: 0,
        statistic: worst,
        success: !states.is_empty() && passed == states.len(),
        detail: format!(
            "largest energy distance {worst:.4} over {} states, {samples} samples each",
            states.len()
        ),
    };
    Ok((report, distances))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        assert!(kkt_suite(12, 500, 0).unwrap().success);
        assert!(equivalence_suite(3, 1).unwrap().success);
        let (suite, reports) = autodiff_suite(2).unwrap();
        assert!(suite.success, "{reports:?}");
        assert_eq!(reports.len(), 10);
    }

    #[test]
    fn affine_policy_is_consistent() {
        let p = FlowMapPolicy::<f32>::affine(&[0.0, 0.0, 0.0, 0.0], &[0.4, -0.2], 1).unwrap();
        let states = DenseArray::zeros(vec![4, 1]);
        assert!(semigroup_check(&p, &states, 100, 1e-5, 3).unwrap().success);
        let (r, d) = sampler_consistency_check(&p, &[vec![0.0]], 200, 5, 0.05, 4).unwrap();
        assert!(r.success, "{d:?}");
    }
}
