//! Q-guided beam search: renoise, complete with the flow map, keep the best
//! candidates under the critic and nudge them along its gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::critic::{clamp_actions, CriticEnsemble, Head};
use crate::diffcore::{DenseArray, Scalar};
use crate::error::{config, domain, Result};
use crate::flowmap::{gaussian, FlowMapPolicy};

/// Which critic scores candidates for selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    /// `min(Q1, Q2)`.
    Min,
    Q1,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QgbsConfig {
    /// Beam size.
    pub m: usize,
    /// Refinement rounds.
    pub k: usize,
    /// Children per candidate per round.
    pub b: usize,
    pub snr: f64,
    /// Fixed displacement radius applied to survivors each round.
    pub eta: f64,
    pub scoring: Scoring,
    /// Whether the parents compete with their children at selection. Keeps
    /// the beam's best value from ever dropping when `eta = 0`.
    pub retain_parents: bool,
}

impl Default for QgbsConfig {
    fn default() -> Self {
        Self {
            m: 4,
            k: 1,
            b: 4,
            snr: 1.5,
            eta: 0.3,
            scoring: Scoring::Min,
            retain_parents: true,
        }
    }
}

impl QgbsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.b == 0 {
            return config(format!(
                "beam size and branches must be positive (m={}, b={})",
                self.m, self.b
            ));
        }
        if !(self.snr > 0.0 && self.snr.is_finite()) {
            return config(format!("snr must be positive and finite, got {}", self.snr));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return config(format!(
                "eta must be finite and non-negative, got {}",
                self.eta
            ));
        }
        Ok(())
    }

    pub fn nfe(&self) -> usize {
        nfe(self.m, self.k, self.b)
    }
}

/// Policy evaluations per action: `m (1 + k b)`.
pub fn nfe(m: usize, k: usize, b: usize) -> usize {
    m * (1 + k * b)
}

/// `rho / (1 + rho)`.
pub fn snr_to_time(rho: f64) -> Result<f64> {
    if !(rho > 0.0) {
        return domain(format!("snr must be positive, got {rho}"));
    }
    if rho.is_infinite() {
        return Ok(1.0);
    }
    Ok(rho / (1.0 + rho))
}

/// `t' a1 + (1 - t') eps`.
pub fn renoise<T: Scalar>(a1: &[T], eps: &[T], t_prime: f64) -> Result<Vec<T>> {
    if !(0.0..=1.0).contains(&t_prime) {
        return domain(format!("renoise time must lie in [0, 1], got {t_prime}"));
    }
    if a1.len() != eps.len() {
        return crate::error::shape(format!(
            "{} action vs {} noise components",
            a1.len(),
            eps.len()
        ));
    }
    let (t, s) = (T::of(t_prime), T::of(1.0 - t_prime));
    Ok(a1.iter().zip(eps).map(|(&a, &e)| t * a + s * e).collect())
}

/// Candidates and bookkeeping at the end of a search.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamState<T: Scalar = f32> {
    pub actions: DenseArray<T>,
    pub q_values: Vec<T>,
    /// Rows pushed through the policy network.
    pub nfe: usize,
}

fn score<T: Scalar>(
    critics: &CriticEnsemble<T>,
    scoring: Scoring,
    s: &DenseArray<T>,
    a: &DenseArray<T>,
) -> Result<Vec<T>> {
    match scoring {
        Scoring::Min => critics.q_min(s, a),
        Scoring::Q1 => critics.q(Head::Q1, s, a),
    }
}

/// First index of the largest value.
fn argmax<T: Scalar>(q: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate() {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `m` largest values, ties broken by lower index.
fn top_m<T: Scalar>(q: &[T], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..q.len()).collect();
    idx.sort_by(|&i, &j| {
        q[j].partial_cmp(&q[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    idx.truncate(m);
    idx
}

fn row_state<T: Scalar>(state: &[T], rows: usize) -> Result<DenseArray<T>> {
    DenseArray::matrix(1, state.len(), state.to_vec()).map(|s| s.repeat_rows(rows))
}

/// Draws `n` one-step samples and returns the best under the critic.
pub fn best_of_n<T: Scalar, R: Rng + ?Sized>(
    policy: &FlowMapPolicy<T>,
    critics: &CriticEnsemble<T>,
    state: &[T],
    n: usize,
    scoring: Scoring,
    rng: &mut R,
) -> Result<(Vec<T>, BeamState<T>)> {
    if n == 0 {
        return config("best-of-n needs n >= 1");
    }
    let s = row_state(state, n)?;
    let a0 = gaussian::<T, _>(rng, n, policy.action_dim());
    let mut a = policy.sample_one_step(&s, &a0)?;
    clamp_actions(&mut a);
    let q = score(critics, scoring, &s, &a)?;
    let best = a.row(argmax(&q)).to_vec();
    Ok((
        best,
        BeamState {
            actions: a,
            q_values: q,
            nfe: n,
        },
    ))
}

/// Runs the beam search from a single state.
pub fn beam_search<T: Scalar, R: Rng + ?Sized>(
    policy: &FlowMapPolicy<T>,
    critics: &CriticEnsemble<T>,
    state: &[T],
    cfg: &QgbsConfig,
    rng: &mut R,
) -> Result<(Vec<T>, BeamState<T>)> {
    cfg.validate()?;
    let (m, b, d) = (cfg.m, cfg.b, policy.action_dim());
    let t_prime = snr_to_time(cfg.snr)?;
    let (_, mut beam) = best_of_n(policy, critics, state, m, cfg.scoring, rng)?;
    let s_children = row_state(state, m * b)?;
    let s_beam = row_state(state, m)?;
    for _ in 0..cfg.k {
        let parents = beam.actions.repeat_rows(b);
        let eps = gaussian::<T, _>(rng, m * b, d);
        let mut noisy = parents.clone();
        for i in 0..m * b {
            let row = renoise(parents.row(i), eps.row(i), t_prime)?;
            noisy.row_mut(i).copy_from_slice(&row);
        }
        let r = vec![T::of(t_prime); m * b];
        let mut children = policy.jump(&s_children, &noisy, &r, &vec![T::ONE; m * b])?;
        beam.nfe += m * b;
        clamp_actions(&mut children);
        let mut q = score(critics, cfg.scoring, &s_children, &children)?;
        let pool = if cfg.retain_parents {
            q.extend_from_slice(&beam.q_values);
            let mut data = children.into_vec();
            data.extend_from_slice(beam.actions.as_slice());
            DenseArray::matrix(m * b + m, d, data)?
        } else {
            children
        };
        let mut survivors = pool.gather_rows(&top_m(&q, m));
        if cfg.eta > 0.0 {
            let g = critics.action_gradient(Head::Q1, &s_beam, &survivors)?;
            for i in 0..m {
                let norm = g
                    .row(i)
                    .iter()
                    .map(|v| v.to_f64().powi(2))
                    .sum::<f64>()
                    .sqrt();
                if norm > 0.0 && norm.is_finite() {
                    let scale = T::of(cfg.eta / norm);
                    let gi = g.row(i).to_vec();
                    for (x, gk) in survivors.row_mut(i).iter_mut().zip(gi) {
                        *x += scale * gk;
                    }
                }
            }
            clamp_actions(&mut survivors);
        }
        beam.q_values = score(critics, cfg.scoring, &s_beam, &survivors)?;
        beam.actions = survivors;
    }
    assert_eq!(
        beam.nfe,
        cfg.nfe(),
        "beam search evaluation count diverged from m(1 + kb)"
    );
    let best = beam.actions.row(argmax(&beam.q_values)).to_vec();
    Ok((best, beam))
}
