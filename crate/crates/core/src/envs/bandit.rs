use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{EnvSpec, EpisodeMemory, RewardKind, StepOutcome};

/// One-step task whose reward is the largest of several Gaussian bumps over
/// the action box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModalBandit {
    pub centers: Vec<[f64; 2]>,
    pub amplitude: f64,
    pub width: f64,
}

impl Default for ModalBandit {
    fn default() -> Self {
        Self {
            centers: vec![[0.6, 0.6], [-0.6, 0.6], [-0.6, -0.6], [0.6, -0.6]],
            amplitude: 1.0,
            width: 0.2,
        }
    }
}

impl ModalBandit {
    pub fn spec(&self) -> EnvSpec {
        EnvSpec {
            name: "modal_bandit".into(),
            state_dim: 1,
            action_dim: 2,
            horizon: 1,
            reward_kind: RewardKind::Dense,
        }
    }

    pub fn reset(&self) -> Vec<f64> {
        vec![0.0]
    }

    pub fn reward(&self, a: &[f64]) -> f64 {
        self.centers
            .iter()
            .map(|c| {
                let d2 = (a[0] - c[0]).powi(2) + (a[1] - c[1]).powi(2);
                self.amplitude * (-d2 / (2.0 * self.width * self.width)).exp()
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the closest bump center.
    pub fn nearest_mode(&self, a: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.centers.iter().enumerate() {
            let d2 = (a[0] - c[0]).powi(2) + (a[1] - c[1]).powi(2);
            if d2 < best.1 {
                best = (i, d2);
            }
        }
        best.0
    }

    pub fn step(&self, state: &[f64], action: &[f64]) -> StepOutcome {
        let reward = self.reward(action);
        StepOutcome {
            next_state: state.to_vec(),
            reward,
            done: true,
            success: reward > 0.5 * self.amplitude,
        }
    }
}

/// Picks a bump uniformly per episode and aims at it with Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BumpPicker {
    pub noise: f64,
}

impl Default for BumpPicker {
    fn default() -> Self {
        Self { noise: 0.3 }
    }
}

impl BumpPicker {
    pub fn begin_episode<R: Rng + ?Sized>(&self, _rng: &mut R) -> EpisodeMemory {
        EpisodeMemory::default()
    }

    pub fn act<R: Rng + ?Sized>(
        &self,
        env: &ModalBandit,
        memory: &mut EpisodeMemory,
        rng: &mut R,
    ) -> Vec<f64> {
        let k = rng.random_range(0..env.centers.len());
        memory.mode = k as i32;
        let mut a = env.centers[k].to_vec();
        if self.noise > 0.0 {
            let n = Normal::new(0.0, self.noise).expect("positive noise");
            for x in &mut a {
                *x += n.sample(rng);
            }
        }
        a
    }
}
