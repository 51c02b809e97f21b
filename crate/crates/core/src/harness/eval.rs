use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::critic::{clamp_actions, CriticEnsemble};
use crate::diffcore::DenseArray;
use crate::envs::{Behavior, Env};
use crate::error::{config, Error, Result};
use crate::flowmap::{gaussian, FlowMapPolicy};
use crate::qgbs::{beam_search, best_of_n, QgbsConfig, Scoring};

/// How an action is drawn from the policy at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampler {
    OneStep,
    BestOfN(usize),
    Qgbs(QgbsConfig),
    /// `n`-step Euler integration of the diagonal velocity.
    Euler(usize),
}

impl Sampler {
    /// Policy-network evaluations per action.
    pub fn nfe(&self) -> usize {
        match self {
            Self::OneStep => 1,
            Self::BestOfN(n) | Self::Euler(n) => *n,
            Self::Qgbs(cfg) => cfg.nfe(),
        }
    }
}

impl fmt::Display for Sampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::OneStep => write!(f, "one-step"),
            Self::BestOfN(n) => write!(f, "best-of-{n}"),
            Self::Qgbs(c) => write!(f, "qgbs(m={}, k={}, b={})", c.m, c.k, c.b),
            Self::Euler(n) => write!(f, "euler-{n}"),
        }
    }
}

/// Parses the sampler family; `n` is the candidate or step count where relevant.
impl FromStr for Sampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "one-step" | "onestep" | "one_step" => Ok(Self::OneStep),
            "best-of-n" | "best_of_n" | "bon" => Ok(Self::BestOfN(32)),
            "qgbs" => Ok(Self::Qgbs(QgbsConfig::default())),
            "euler" => Ok(Self::Euler(20)),
            other => config(format!(
                "unknown sampler '{other}' (expected one-step, best-of-n, qgbs or euler)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    pub return_std: f64,
    /// Analytic policy evaluations per action.
    pub nfe_per_action: usize,
    /// Measured policy evaluations per action (beam counter for QGBS).
    pub measured_nfe_per_action: f64,
    pub successes: Vec<bool>,
}

fn summarize(returns: &[f64], successes: Vec<bool>, nfe: usize, measured: f64) -> EvalReport {
    let n = returns.len().max(1) as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    EvalReport {
        episodes: returns.len(),
        success_rate: successes.iter().filter(|&&s| s).count() as f64 / n,
        mean_return: mean,
        return_std: var.sqrt(),
        nfe_per_action: nfe,
        measured_nfe_per_action: measured,
        successes,
    }
}

/// Runs `episodes` episodes in lockstep. All episodes are reset first, then
/// at every time step actions are drawn for the still-running episodes in
/// index order.
pub fn evaluate<R: Rng + ?Sized>(
    policy: &FlowMapPolicy<f32>,
    critics: &CriticEnsemble<f32>,
    env: &Env,
    episodes: usize,
    sampler: Sampler,
    rng: &mut R,
) -> Result<EvalReport> {
    if episodes == 0 {
        return config("evaluation needs at least one episode");
    }
    let spec = env.spec();
    let (n, d) = (spec.state_dim, spec.action_dim);
    let mut states: Vec<Vec<f64>> = (0..episodes).map(|_| env.reset(rng)).collect();
    let mut returns = vec![0.0; episodes];
    let mut success = vec![false; episodes];
    let mut running: Vec<usize> = (0..episodes).collect();
    let (mut calls, mut actions_taken) = (0usize, 0usize);
    for _ in 0..spec.horizon {
        if running.is_empty() {
            break;
        }
        let s = DenseArray::matrix(
            running.len(),
            n,
            running
                .iter()
                .flat_map(|&i| states[i].iter().map(|&v| v as f32))
                .collect(),
        )?;
        let actions: DenseArray<f32> = match sampler {
            Sampler::OneStep | Sampler::Euler(_) => {
                let a0 = gaussian::<f32, _>(rng, running.len(), d);
                let mut a = match sampler {
                    Sampler::Euler(k) => policy.sample_euler(&s, &a0, k)?,
                    _ => policy.sample_one_step(&s, &a0)?,
                };
                clamp_actions(&mut a);
                calls += running.len() * sampler.nfe();
                a
            }
            Sampler::BestOfN(k) => {
                let mut rows = Vec::with_capacity(running.len() * d);
                for i in 0..running.len() {
                    let (a, beam) = best_of_n(policy, critics, s.row(i), k, Scoring::Min, rng)?;
                    calls += beam.nfe;
                    rows.extend(a);
                }
                DenseArray::matrix(running.len(), d, rows)?
            }
            Sampler::Qgbs(cfg) => {
                let mut rows = Vec::with_capacity(running.len() * d);
                for i in 0..running.len() {
                    let (a, beam) = beam_search(policy, critics, s.row(i), &cfg, rng)?;
                    calls += beam.nfe;
                    rows.extend(a);
                }
                DenseArray::matrix(running.len(), d, rows)?
            }
        };
        actions_taken += running.len();
        let mut still = Vec::with_capacity(running.len());
        for (row, &i) in running.iter().enumerate() {
            let a: Vec<f64> = actions.row(row).iter().map(|&v| v as f64).collect();
            let out = env.step(&states[i], &a)?;
            returns[i] += out.reward;
            states[i] = out.next_state;
            if out.done {
                success[i] = out.success;
            } else {
                still.push(i);
            }
        }
        running = still;
    }
    Ok(summarize(
        &returns,
        success,
        sampler.nfe(),
        calls as f64 / actions_taken.max(1) as f64,
    ))
}

/// Rolls out a scripted behavior policy.
pub fn evaluate_behavior<R: Rng + ?Sized>(
    env: &Env,
    behavior: &Behavior,
    episodes: usize,
    rng: &mut R,
) -> Result<EvalReport> {
    if episodes == 0 {
        return config("evaluation needs at least one episode");
    }
    let mut returns = Vec::with_capacity(episodes);
    let mut successes = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut s = env.reset(rng);
        let mut memory = behavior.begin_episode(rng);
        let (mut ret, mut ok) = (0.0, false);
        for k in 0..env.spec().horizon {
            let a = behavior.act(env, &mut memory, &s, k, rng)?;
            let out = env.step(&s, &a)?;
            ret += out.reward;
            s = out.next_state;
            if out.done {
                ok = out.success;
                break;
            }
        }
        returns.push(ret);
        successes.push(ok);
    }
    Ok(summarize(&returns, successes, 0, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::CriticArch;
    use crate::flowmap::PolicyArch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn models() -> (FlowMapPolicy<f32>, CriticEnsemble<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = FlowMapPolicy::new(
            4,
            2,
            &PolicyArch {
                hidden: vec![16],
                ..Default::default()
            },
            &mut rng,
        )
        .unwrap();
        let c = CriticEnsemble::new(
            4,
            2,
            &CriticArch {
                hidden: vec![16],
                ..Default::default()
            },
            0.99,
            0.005,
            &mut rng,
        )
        .unwrap();
        (p, c)
    }

    #[test]
    fn oracle_behavior_always_succeeds() {
        let env = Env::by_name("point_mass_gate").unwrap();
        let r = evaluate_behavior(
            &env,
            &env.oracle_behavior(),
            100,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert_eq!(r.success_rate, 1.0);
    }

    #[test]
    fn best_of_one_is_one_step() {
        let (p, c) = models();
        let env = Env::by_name("point_mass_gate").unwrap();
        let a = evaluate(
            &p,
            &c,
            &env,
            8,
            Sampler::OneStep,
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        let b = evaluate(
            &p,
            &c,
            &env,
            8,
            Sampler::BestOfN(1),
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        assert_eq!(
            a,
            EvalReport {
                nfe_per_action: 1,
                ..b
            }
        );
    }

    #[test]
    fn nfe_accounting() {
        let (p, c) = models();
        let env = Env::by_name("point_mass_gate").unwrap();
        let r = evaluate(
            &p,
            &c,
            &env,
            2,
            Sampler::BestOfN(32),
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap();
        assert_eq!((r.nfe_per_action, r.measured_nfe_per_action), (32, 32.0));
        let cfg = QgbsConfig {
            m: 4,
            k: 1,
            b: 4,
            ..Default::default()
        };
        let r = evaluate(
            &p,
            &c,
            &env,
            2,
            Sampler::Qgbs(cfg),
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap();
        assert_eq!((r.nfe_per_action, r.measured_nfe_per_action), (20, 20.0));
        assert!(evaluate(
            &p,
            &c,
            &env,
            0,
            Sampler::OneStep,
            &mut ChaCha8Rng::seed_from_u64(4)
        )
        .is_err());
    }
}
