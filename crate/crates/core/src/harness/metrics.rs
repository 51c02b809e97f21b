use rand::Rng;

use crate::error::{config, domain, Result};

/// Mean of the middle half: `floor(n/4)` values are trimmed from each end.
pub fn iqm(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return domain("iqm of an empty list");
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let cut = v.len() / 4;
    let mid = &v[cut..v.len() - cut];
    Ok(mid.iter().sum::<f64>() / mid.len() as f64)
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// 95% percentile interval of the IQM under stratified resampling: seeds are
/// drawn with replacement separately within each row (environment) of
/// `scores`, and the IQM is taken over the pooled resample.
pub fn bootstrap_ci<R: Rng + ?Sized>(
    scores: &[Vec<f64>],
    resamples: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if resamples < 1000 {
        return config(format!(
            "bootstrap needs at least 1000 resamples, got {resamples}"
        ));
    }
    if scores.is_empty() || scores.iter().any(Vec::is_empty) {
        return domain("bootstrap over an empty score matrix");
    }
    let pooled: Vec<f64> = scores.iter().flatten().copied().collect();
    if pooled.iter().all(|&x| x == pooled[0]) {
        return Ok((pooled[0], pooled[0]));
    }
    let mut stats = Vec::with_capacity(resamples);
    let mut sample = Vec::with_capacity(pooled.len());
    for _ in 0..resamples {
        sample.clear();
        for row in scores {
            for _ in 0..row.len() {
                sample.push(row[rng.random_range(0..row.len())]);
            }
        }
        stats.push(iqm(&sample)?);
    }
    stats.sort_by(f64::total_cmp);
    Ok((percentile(&stats, 0.025), percentile(&stats, 0.975)))
}
