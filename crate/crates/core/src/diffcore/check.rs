//! Central-difference oracles for the analytic derivatives of [`Mlp`].

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{DenseArray, Mlp, Tangent};
use crate::Result;

/// Outcome of comparing analytic derivatives against finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub checked: usize,
    pub failures: usize,
    pub worst_gap: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }

    fn record(&mut self, analytic: f64, numeric: f64, rtol: f64) {
        let gap = relative_gap(analytic, numeric);
        self.checked += 1;
        self.worst_gap = self.worst_gap.max(gap);
        if gap > rtol {
            self.failures += 1;
        }
    }
}

/// `|a - b| / max(|a|, |b|)`, with an absolute floor so that two
/// near-zero values compare as equal.
pub fn relative_gap(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    let diff = (a - b).abs();
    if diff < 1e-9 {
        0.0
    } else {
        diff / scale
    }
}

pub fn random_matrix<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    scale: f64,
) -> DenseArray<f64> {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    DenseArray::matrix(rows, cols, data).expect("consistent shape")
}

fn weighted(out: &DenseArray<f64>, w: &DenseArray<f64>) -> f64 {
    out.as_slice()
        .iter()
        .zip(w.as_slice())
        .map(|(a, b)| a * b)
        .sum()
}

/// Parameter gradient of `<w, f(x)>` (plus `<w_dot, J f v>` when a tangent is
/// given) against central differences on `coords` random parameters.
#[allow(clippy::too_many_arguments)]
pub fn parameter_gradient<R: Rng + ?Sized>(
    net: &Mlp<f64>,
    inputs: &DenseArray<f64>,
    times: &DenseArray<f64>,
    tangent: Option<&Tangent<'_, f64>>,
    coords: usize,
    eps: f64,
    rtol: f64,
    rng: &mut R,
) -> Result<CheckReport> {
    let rows = inputs.rows();
    let out_w = net.spec().output_width;
    let w = random_matrix(rng, rows, out_w, 1.0);
    let w_dot = random_matrix(rng, rows, out_w, 1.0);
    let objective = |n: &Mlp<f64>| -> Result<f64> {
        match tangent {
            Some(tan) => {
                let (y, yd) = n.forward_dual(inputs, times, tan)?;
                Ok(weighted(&y, &w) + weighted(&yd, &w_dot))
            }
            None => Ok(weighted(&n.forward(inputs, times)?, &w)),
        }
    };
    let (_, tape) = net.forward_taped(inputs, times, tangent)?;
    let mut grads = vec![0.0; net.num_params()];
    net.backward(&tape, &w, tangent.map(|_| &w_dot), &mut grads, false)?;
    let name = if tangent.is_some() {
        "gradient through jvp"
    } else {
        "parameter gradient"
    };
    let mut report = CheckReport {
        name: name.into(),
        checked: 0,
        failures: 0,
        worst_gap: 0.0,
    };
    let mut probe = net.clone();
    for i in sample(rng, net.num_params(), coords.min(net.num_params())) {
        let base = net.params()[i];
        probe.params_mut()[i] = base + eps;
        let up = objective(&probe)?;
        probe.params_mut()[i] = base - eps;
        let down = objective(&probe)?;
        probe.params_mut()[i] = base;
        report.record(grads[i], (up - down) / (2.0 * eps), rtol);
    }
    Ok(report)
}

/// Forward-mode JVP along random directions against central differences.
/// Each trial checks one random output coordinate.
#[allow(clippy::too_many_arguments)]
pub fn jvp<R: Rng + ?Sized>(
    net: &Mlp<f64>,
    inputs: &DenseArray<f64>,
    times: &DenseArray<f64>,
    trials: usize,
    eps: f64,
    rtol: f64,
    rng: &mut R,
) -> Result<CheckReport> {
    let rows = inputs.rows();
    let out_w = net.spec().output_width;
    let mut report = CheckReport {
        name: "jvp".into(),
        checked: 0,
        failures: 0,
        worst_gap: 0.0,
    };
    for _ in 0..trials {
        let v = random_matrix(rng, rows, inputs.cols(), 1.0);
        let vt = random_matrix(rng, rows, times.cols(), 0.1);
        let analytic = net.jvp(
            inputs,
            times,
            &Tangent {
                inputs: &v,
                times: &vt,
            },
        )?;
        let shift = |sign: f64| -> Result<DenseArray<f64>> {
            let x = inputs.zip_map(&v, |a, d| a + sign * eps * d)?;
            let t = times.zip_map(&vt, |a, d| a + sign * eps * d)?;
            net.forward(&x, &t)
        };
        let (up, down) = (shift(1.0)?, shift(-1.0)?);
        let k = rng.random_range(0..rows * out_w);
        let numeric = (up.as_slice()[k] - down.as_slice()[k]) / (2.0 * eps);
        report.record(analytic.as_slice()[k], numeric, rtol);
    }
    Ok(report)
}

/// Reverse-mode gradient with respect to the raw inputs against central
/// differences on random input coordinates.
pub fn input_gradient<R: Rng + ?Sized>(
    net: &Mlp<f64>,
    inputs: &DenseArray<f64>,
    times: &DenseArray<f64>,
    coords: usize,
    eps: f64,
    rtol: f64,
    rng: &mut R,
) -> Result<CheckReport> {
    let w = random_matrix(rng, inputs.rows(), net.spec().output_width, 1.0);
    let g = net.input_gradient(inputs, times, &w)?;
    let mut report = CheckReport {
        name: "input gradient".into(),
        checked: 0,
        failures: 0,
        worst_gap: 0.0,
    };
    let mut x = inputs.clone();
    for i in sample(rng, inputs.len(), coords.min(inputs.len())) {
        let base = inputs.as_slice()[i];
        x.as_mut_slice()[i] = base + eps;
        let up = weighted(&net.forward(&x, times)?, &w);
        x.as_mut_slice()[i] = base - eps;
        let down = weighted(&net.forward(&x, times)?, &w);
        x.as_mut_slice()[i] = base;
        report.record(g.as_slice()[i], (up - down) / (2.0 * eps), rtol);
    }
    Ok(report)
}
