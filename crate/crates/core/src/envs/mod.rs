//! Toy continuous-control tasks with multimodal optimal behavior, scripted
//! behavior policies and offline dataset generation.

mod bandit;
mod dataset;
mod gate;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

pub use bandit::{BumpPicker, ModalBandit};
pub use dataset::{generate_offline_dataset, Dataset, DatasetStats, Transition};
pub use gate::{GateRouter, PointMassGate};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Dense,
    Sparse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub reward_kind: RewardKind,
}

/// Result of one environment step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    /// Terminal (success or failure); timeouts are not terminal.
    pub done: bool,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Env {
    PointMassGate(PointMassGate),
    ModalBandit(ModalBandit),
}

impl Env {
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "point_mass_gate" | "point-mass-gate" | "PointMassGate" => {
                Ok(Self::PointMassGate(PointMassGate::default()))
            }
            "modal_bandit" | "modal-bandit" | "ModalBandit" => {
                Ok(Self::ModalBandit(ModalBandit::default()))
            }
            other => config(format!(
                "unknown environment '{other}' (expected point_mass_gate or modal_bandit)"
            )),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::PointMassGate(_) => "point_mass_gate",
            Self::ModalBandit(_) => "modal_bandit",
        }
    }

    pub fn spec(&self) -> EnvSpec {
        match self {
            Self::PointMassGate(e) => e.spec(),
            Self::ModalBandit(e) => e.spec(),
        }
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Self::PointMassGate(e) => e.reset(rng),
            Self::ModalBandit(e) => e.reset(),
        }
    }

    /// Clamps `action` to the box and advances the dynamics.
    pub fn step(&self, state: &[f64], action: &[f64]) -> Result<StepOutcome> {
        let spec = self.spec();
        if state.len() != spec.state_dim || action.len() != spec.action_dim {
            return Err(crate::Error::Env(format!(
                "{}: expected state {} / action {}, got {} / {}",
                spec.name,
                spec.state_dim,
                spec.action_dim,
                state.len(),
                action.len()
            )));
        }
        if action.iter().chain(state).any(|v| !v.is_finite()) {
            return Err(crate::Error::Env(format!(
                "{}: non-finite state or action",
                spec.name
            )));
        }
        let a: Vec<f64> = action.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        Ok(match self {
            Self::PointMassGate(e) => e.step(state, &a),
            Self::ModalBandit(e) => e.step(state, &a),
        })
    }

    /// Fixed, representative states for distributional checks of a policy.
    pub fn probe_states(&self) -> Vec<Vec<f64>> {
        match self {
            Self::PointMassGate(e) => [
                [-1.0, 0.0],
                [-0.6, 0.2],
                [-0.3, -0.4],
                [0.3, 0.4],
                [0.7, -0.1],
            ]
            .iter()
            .map(|p| vec![p[0], p[1], e.goal[0], e.goal[1]])
            .collect(),
            Self::ModalBandit(e) => vec![e.reset()],
        }
    }

    /// Scripted behavior policy used to build offline datasets.
    pub fn behavior(&self) -> Behavior {
        match self {
            Self::PointMassGate(_) => Behavior::Router(GateRouter::default()),
            Self::ModalBandit(_) => Behavior::Picker(BumpPicker::default()),
        }
    }

    /// Noise-free scripted policy that solves the task.
    pub fn oracle_behavior(&self) -> Behavior {
        match self {
            Self::PointMassGate(_) => Behavior::Router(GateRouter::oracle()),
            Self::ModalBandit(_) => Behavior::Picker(BumpPicker { noise: 0.0 }),
        }
    }
}

/// Scripted, stateful behavior policies.
#[derive(Clone, Debug, PartialEq)]
pub enum Behavior {
    Router(GateRouter),
    Picker(BumpPicker),
}

/// Per-episode record of a scripted policy: the mode it last acted in.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeMemory {
    pub mode: i32,
}

impl Behavior {
    pub fn begin_episode<R: Rng + ?Sized>(&self, rng: &mut R) -> EpisodeMemory {
        match self {
            Self::Router(b) => b.begin_episode(rng),
            Self::Picker(b) => b.begin_episode(rng),
        }
    }

    pub fn act<R: Rng + ?Sized>(
        &self,
        env: &Env,
        memory: &mut EpisodeMemory,
        state: &[f64],
        step: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let mut a = match (self, env) {
            (Self::Router(b), Env::PointMassGate(e)) => b.act(e, memory, state, step, rng),
            (Self::Picker(b), Env::ModalBandit(e)) => b.act(e, memory, rng),
            _ => {
                return config(format!(
                    "behavior does not match environment {}",
                    env.name()
                ))
            }
        };
        for x in &mut a {
            *x = x.clamp(-1.0, 1.0);
        }
        Ok(a)
    }
}
