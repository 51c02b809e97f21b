use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Behavior, Env};
use crate::diffcore::{DenseArray, TensorPack, DATASET_MAGIC};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Behavior-rollout summary stored with a dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    /// Fraction of episodes per mode. PointMassGate: `[above, below]`,
    /// judged by the side on which the trajectory first crosses the obstacle's
    /// x-coordinate (episodes that never cross count for neither).
    /// ModalBandit: per bump, by nearest center.
    pub mode_fractions: Vec<f64>,
    /// Upper bound on the achievable return from the nominal start.
    pub return_bound: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub env: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub transitions: Vec<Transition>,
    pub stats: DatasetStats,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn to_pack(&self) -> Result<TensorPack> {
        let n = self.len();
        let col = |f: &dyn Fn(&Transition) -> Vec<f64>, w: usize| -> Result<DenseArray<f32>> {
            let data = self
                .transitions
                .iter()
                .flat_map(f)
                .map(|v| v as f32)
                .collect();
            DenseArray::matrix(n, w, data)
        };
        let flat = |f: &dyn Fn(&Transition) -> f64| -> Result<DenseArray<f32>> {
            DenseArray::new(
                vec![n],
                self.transitions.iter().map(|t| f(t) as f32).collect(),
            )
        };
        let mut pack = TensorPack::new(serde_json::json!({
            "env": self.env,
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "stats": self.stats,
        }));
        pack.insert("states", col(&|t| t.state.clone(), self.state_dim)?);
        pack.insert("actions", col(&|t| t.action.clone(), self.action_dim)?);
        pack.insert("rewards", flat(&|t| t.reward)?);
        pack.insert(
            "next_states",
            col(&|t| t.next_state.clone(), self.state_dim)?,
        );
        pack.insert("dones", flat(&|t| if t.done { 1.0 } else { 0.0 })?);
        Ok(pack)
    }

    pub fn from_pack(pack: &TensorPack) -> Result<Self> {
        let meta = &pack.metadata;
        let bad = |m: &str| Error::Format(format!("dataset: {m}"));
        let env = meta["env"]
            .as_str()
            .ok_or_else(|| bad("missing env"))?
            .to_string();
        let state_dim = meta["state_dim"]
            .as_u64()
            .ok_or_else(|| bad("missing state_dim"))? as usize;
        let action_dim = meta["action_dim"]
            .as_u64()
            .ok_or_else(|| bad("missing action_dim"))? as usize;
        let stats: DatasetStats = serde_json::from_value(meta["stats"].clone()).unwrap_or_default();
        let (s, a, r) = (
            pack.get("states")?,
            pack.get("actions")?,
            pack.get("rewards")?,
        );
        let (s2, d) = (pack.get("next_states")?, pack.get("dones")?);
        let n = r.len();
        s.ensure_shape(n, state_dim, "states")?;
        a.ensure_shape(n, action_dim, "actions")?;
        s2.ensure_shape(n, state_dim, "next_states")?;
        if d.len() != n {
            return Err(bad("dones length"));
        }
        let f = |x: &[f32]| x.iter().map(|&v| v as f64).collect::<Vec<_>>();
        let transitions = (0..n)
            .map(|i| Transition {
                state: f(s.row(i)),
                action: f(a.row(i)),
                reward: r.as_slice()[i] as f64,
                next_state: f(s2.row(i)),
                done: d.as_slice()[i] != 0.0,
            })
            .collect();
        Ok(Self {
            env,
            state_dim,
            action_dim,
            transitions,
            stats,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_pack()?.save(path, DATASET_MAGIC)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_pack(&TensorPack::load(path, DATASET_MAGIC)?)
    }

    /// All columns as f32 batches: states, actions, rewards, next states, dones.
    pub fn states(&self) -> DenseArray<f32> {
        let data = self
            .transitions
            .iter()
            .flat_map(|t| t.state.iter().map(|&v| v as f32))
            .collect();
        DenseArray::matrix(self.len(), self.state_dim, data).expect("consistent dataset")
    }

    pub fn actions(&self) -> DenseArray<f32> {
        let data = self
            .transitions
            .iter()
            .flat_map(|t| t.action.iter().map(|&v| v as f32))
            .collect();
        DenseArray::matrix(self.len(), self.action_dim, data).expect("consistent dataset")
    }
}

/// Side (+1 above, −1 below, 0 none) on which a trajectory first reaches the
/// obstacle's x-coordinate.
pub(crate) fn crossing_side(xs: &[[f64; 2]], cx: f64, cy: f64) -> i32 {
    for p in xs {
        if p[0] >= cx {
            return if p[1] >= cy { 1 } else { -1 };
        }
    }
    0
}

/// Rolls out `behavior` for `episodes` episodes and records every transition.
pub fn generate_offline_dataset<R: Rng + ?Sized>(
    env: &Env,
    behavior: &Behavior,
    episodes: usize,
    rng: &mut R,
) -> Result<Dataset> {
    let spec = env.spec();
    let mut transitions = Vec::new();
    let (mut successes, mut total_return) = (0usize, 0.0);
    let modes = match env {
        Env::PointMassGate(_) => 2,
        Env::ModalBandit(e) => e.centers.len(),
    };
    let mut mode_counts = vec![0usize; modes];
    for _ in 0..episodes {
        let mut s = env.reset(rng);
        let mut memory = behavior.begin_episode(rng);
        let mut path = vec![[s[0], s.get(1).copied().unwrap_or(0.0)]];
        for k in 0..spec.horizon {
            let a = behavior.act(env, &mut memory, &s, k, rng)?;
            let out = env.step(&s, &a)?;
            total_return += out.reward;
            if let Env::ModalBandit(e) = env {
                mode_counts[e.nearest_mode(&a)] += 1;
            }
            transitions.push(Transition {
                state: s,
                action: a,
                reward: out.reward,
                next_state: out.next_state.clone(),
                done: out.done,
            });
            s = out.next_state;
            if let Env::PointMassGate(_) = env {
                path.push([s[0], s[1]]);
            }
            if out.done {
                successes += out.success as usize;
                break;
            }
        }
        if let Env::PointMassGate(e) = env {
            match crossing_side(&path, e.obstacle_center[0], e.obstacle_center[1]) {
                1 => mode_counts[0] += 1,
                -1 => mode_counts[1] += 1,
                _ => {}
            }
        }
    }
    let denom = episodes.max(1) as f64;
    let stats = DatasetStats {
        episodes,
        success_rate: successes as f64 / denom,
        mean_return: total_return / denom,
        mode_fractions: mode_counts.iter().map(|&c| c as f64 / denom).collect(),
        return_bound: match env {
            Env::PointMassGate(e) => Some(e.return_bound(e.start)),
            Env::ModalBandit(e) => Some(e.amplitude),
        },
    };
    Ok(Dataset {
        env: env.name().into(),
        state_dim: spec.state_dim,
        action_dim: spec.action_dim,
        transitions,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_episodes_is_empty() {
        let env = Env::by_name("point_mass_gate").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = generate_offline_dataset(&env, &env.behavior(), 0, &mut rng).unwrap();
        assert!(d.is_empty());
        assert_eq!(d.stats.success_rate, 0.0);
    }

    #[test]
    fn gate_behavior_is_balanced_and_suboptimal() {
        let env = Env::by_name("point_mass_gate").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = generate_offline_dataset(&env, &env.behavior(), 1000, &mut rng).unwrap();
        let m = &d.stats.mode_fractions;
        let above = m[0] / (m[0] + m[1]);
        assert!((0.4..=0.6).contains(&above), "mode ratio {above}");
        assert!(
            (0.5..=0.7).contains(&d.stats.success_rate),
            "success {}",
            d.stats.success_rate
        );
        assert!(d
            .transitions
            .iter()
            .all(|t| t.action.iter().all(|a| a.abs() <= 1.0)));
    }

    #[test]
    fn pack_roundtrip() {
        let env = Env::by_name("modal_bandit").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = generate_offline_dataset(&env, &env.behavior(), 50, &mut rng).unwrap();
        let bytes = d.to_pack().unwrap().to_bytes(DATASET_MAGIC).unwrap();
        let back =
            Dataset::from_pack(&TensorPack::from_bytes(&bytes, DATASET_MAGIC).unwrap()).unwrap();
        assert_eq!(back.len(), 50);
        assert_eq!(back.stats, d.stats);
        for (a, b) in d.transitions.iter().zip(&back.transitions) {
            assert!((a.action[0] - b.action[0]).abs() < 1e-6);
            assert_eq!(a.done, b.done);
        }
    }
}
