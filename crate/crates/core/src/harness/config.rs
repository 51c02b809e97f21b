use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::critic::CriticArch;
use crate::error::{config, Result};
use crate::flowmap::{Curriculum, Distillation, PolicyArch};
use crate::fmq::TrustRegionConfig;
use crate::qgbs::QgbsConfig;

/// Every knob of an offline-then-online run. Loaded from JSON; missing keys
/// take the defaults below and unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env: String,
    pub offline_steps: u64,
    pub online_steps: u64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub seeds: Vec<u64>,
    pub variant: Distillation,
    /// Weight of the self-distillation term in the offline actor loss.
    pub lambda: f64,
    pub trust_region: TrustRegionConfig,
    pub qgbs: QgbsConfig,
    pub policy: PolicyArch,
    pub critic: CriticArch,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub curriculum: Curriculum,
    /// Weight of the diagonal loss kept during online adaptation (0 = FMQ
    /// regression only).
    pub online_diag_weight: f64,
    /// Offline dataset file; may be overridden from the command line.
    pub data: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: "point_mass_gate".into(),
            offline_steps: 50_000,
            online_steps: 50_000,
            batch_size: 256,
            buffer_capacity: 100_000,
            eval_interval: 2_000,
            eval_episodes: 50,
            seeds: vec![0, 1, 2, 3, 4],
            variant: Distillation::Epd,
            lambda: 1.0,
            trust_region: TrustRegionConfig::default(),
            qgbs: QgbsConfig::default(),
            policy: PolicyArch::default(),
            critic: CriticArch::default(),
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            gamma: 0.99,
            tau: 0.005,
            curriculum: Curriculum::default(),
            online_diag_weight: 0.0,
            data: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| crate::Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        crate::envs::Env::by_name(&self.env)?;
        if self.batch_size == 0
            || self.buffer_capacity == 0
            || self.eval_interval == 0
            || self.eval_episodes == 0
        {
            return config(
                "batch_size, buffer_capacity, eval_interval and eval_episodes must be positive",
            );
        }
        if !(self.lambda >= 0.0) {
            return config(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.online_diag_weight >= 0.0 && self.online_diag_weight.is_finite()) {
            return config(format!(
                "online_diag_weight must be finite and non-negative, got {}",
                self.online_diag_weight
            ));
        }
        if !(self.actor_lr >= 0.0 && self.critic_lr >= 0.0) {
            return config("learning rates must be non-negative");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return config(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return config(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if self
            .policy
            .hidden
            .iter()
            .chain(&self.critic.hidden)
            .any(|&w| w == 0)
        {
            return config("hidden widths must be positive");
        }
        self.trust_region.validate()?;
        self.qgbs.validate()
    }
}
