use rand::Rng;

use crate::diffcore::DenseArray;
use crate::error::{shape, Result};
use crate::flowmap::{gaussian, FlowMapPolicy};

/// `| X_{w,1}(X_{0,w}(a0)) - X_{0,1}(a0) |` for every row.
pub fn semigroup_gaps(
    policy: &FlowMapPolicy<f32>,
    states: &DenseArray<f32>,
    a0: &DenseArray<f32>,
    w: &[f32],
) -> Result<Vec<f64>> {
    let n = states.rows();
    if w.len() != n || a0.rows() != n {
        return shape(format!(
            "semigroup check: {n} states, {} noises, {} midpoints",
            a0.rows(),
            w.len()
        ));
    }
    let (zeros, ones) = (vec![0.0f32; n], vec![1.0f32; n]);
    let mid = policy.jump(states, a0, &zeros, w)?;
    let two = policy.jump(states, &mid, w, &ones)?;
    let one = policy.jump(states, a0, &zeros, &ones)?;
    Ok((0..n)
        .map(|i| {
            two.row(i)
                .iter()
                .zip(one.row(i))
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Semigroup gaps on `count` held-out triples: states drawn from `states`,
/// fresh noise and `w ~ U(0, 1)`.
pub fn sample_semigroup_gaps<R: Rng + ?Sized>(
    policy: &FlowMapPolicy<f32>,
    states: &DenseArray<f32>,
    count: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..count)
        .map(|_| rng.random_range(0..states.rows()))
        .collect();
    let s = states.gather_rows(&idx);
    let a0 = gaussian(rng, count, policy.action_dim());
    let w: Vec<f32> = (0..count).map(|_| rng.random::<f32>()).collect();
    semigroup_gaps(policy, &s, &a0, &w)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean_pair_distance(x: &DenseArray<f32>, y: &DenseArray<f32>, same: bool) -> f64 {
    let (mut total, mut count) = (0.0, 0usize);
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            if same && i == j {
                continue;
            }
            total += x
                .row(i)
                .iter()
                .zip(y.row(j))
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            count += 1;
        }
    }
    total / count.max(1) as f64
}

/// Energy distance `2 E|X - Y| - E|X - X'| - E|Y - Y'|`, with the
/// within-sample terms averaged over distinct pairs.
pub fn energy_distance(x: &DenseArray<f32>, y: &DenseArray<f32>) -> Result<f64> {
    if x.cols() != y.cols() || x.rows() < 2 || y.rows() < 2 {
        return shape(
            "energy distance needs two samples of equal width with at least two rows each",
        );
    }
    Ok(2.0 * mean_pair_distance(x, y, false)
        - mean_pair_distance(x, x, true)
        - mean_pair_distance(y, y, true))
}
