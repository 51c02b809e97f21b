use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{EnvSpec, EpisodeMemory, RewardKind, StepOutcome};

/// Point mass that must pass a circular obstacle, either side, to reach a goal.
///
/// State is `[x, y, goal_x, goal_y]`; dynamics are `p' = p + step_scale * a`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PointMassGate {
    pub start: [f64; 2],
    /// Half-width of the uniform box around `start` for initial positions.
    pub start_spread: f64,
    pub goal: [f64; 2],
    pub obstacle_center: [f64; 2],
    pub obstacle_radius: f64,
    pub step_scale: f64,
    pub success_radius: f64,
    pub horizon: usize,
    /// Terminal reward on collision is `-collision_penalty`.
    pub collision_penalty: f64,
}

impl Default for PointMassGate {
    fn default() -> Self {
        Self {
            start: [-1.0, 0.0],
            start_spread: 0.1,
            goal: [1.0, 0.0],
            obstacle_center: [0.0, 0.0],
            obstacle_radius: 0.3,
            step_scale: 0.1,
            success_radius: 0.1,
            horizon: 60,
            collision_penalty: 20.0,
        }
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl PointMassGate {
    pub fn spec(&self) -> EnvSpec {
        EnvSpec {
            name: "point_mass_gate".into(),
            state_dim: 4,
            action_dim: 2,
            horizon: self.horizon,
            reward_kind: RewardKind::Dense,
        }
    }

    /// Variance of each initial coordinate, `spread^2 / 3`.
    pub fn start_variance(&self) -> f64 {
        self.start_spread * self.start_spread / 3.0
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let w = self.start_spread;
        let x = self.start[0]
            + if w > 0.0 {
                rng.random_range(-w..w)
            } else {
                0.0
            };
        let y = self.start[1]
            + if w > 0.0 {
                rng.random_range(-w..w)
            } else {
                0.0
            };
        vec![x, y, self.goal[0], self.goal[1]]
    }

    /// Whether the segment from `a` to `b` enters the obstacle.
    fn segment_hits(&self, a: [f64; 2], b: [f64; 2]) -> bool {
        let c = self.obstacle_center;
        let d = [b[0] - a[0], b[1] - a[1]];
        let len2 = d[0] * d[0] + d[1] * d[1];
        let s = if len2 == 0.0 {
            0.0
        } else {
            (((c[0] - a[0]) * d[0] + (c[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
        };
        dist([a[0] + s * d[0], a[1] + s * d[1]], c) < self.obstacle_radius
    }

    pub fn step(&self, state: &[f64], action: &[f64]) -> StepOutcome {
        let p = [state[0], state[1]];
        let q = [
            p[0] + self.step_scale * action[0],
            p[1] + self.step_scale * action[1],
        ];
        let next_state = vec![q[0], q[1], self.goal[0], self.goal[1]];
        if self.segment_hits(p, q) {
            return StepOutcome {
                next_state,
                reward: -self.collision_penalty,
                done: true,
                success: false,
            };
        }
        let d = dist(q, self.goal);
        let success = d < self.success_radius;
        StepOutcome {
            next_state,
            reward: -d,
            done: success,
            success,
        }
    }

    /// Length of the shortest collision-free path from `p` to the goal region.
    pub fn shortest_path_length(&self, p: [f64; 2]) -> f64 {
        let c = self.obstacle_center;
        let rho = self.obstacle_radius;
        let (da, db) = (dist(p, c), dist(self.goal, c));
        let direct = dist(p, self.goal);
        let path = if !self.segment_hits(p, self.goal) || da <= rho || db <= rho {
            direct
        } else {
            let ta = (da * da - rho * rho).sqrt();
            let tb = (db * db - rho * rho).sqrt();
            let angle_pg = {
                let u = [p[0] - c[0], p[1] - c[1]];
                let v = [self.goal[0] - c[0], self.goal[1] - c[1]];
                ((u[0] * v[0] + u[1] * v[1]) / (da * db))
                    .clamp(-1.0, 1.0)
                    .acos()
            };
            let arc = (angle_pg - (rho / da).acos() - (rho / db).acos()).max(0.0);
            ta + tb + rho * arc
        };
        (path - self.success_radius).max(0.0)
    }

    /// Upper bound on the return of any policy from `p`: travel the shortest
    /// path at the largest speed the action box allows along the axis-aligned
    /// worst case, collecting `-distance` each step.
    pub fn return_bound(&self, p: [f64; 2]) -> f64 {
        let max_step = self.step_scale * std::f64::consts::SQRT_2;
        let mut remaining = self.shortest_path_length(p) + self.success_radius;
        let mut total = 0.0;
        for _ in 0..self.horizon {
            remaining -= max_step;
            if remaining < self.success_radius {
                total -= remaining.max(0.0);
                break;
            }
            total -= remaining;
        }
        total
    }
}

/// Two-mode scripted router: heads for a waypoint beside the obstacle on
/// the side the point currently occupies, then for the goal, with Gaussian
/// action noise. The choice of side depends only on the state, so noise that
/// pushes the point across the centerline makes it change its mind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateRouter {
    pub speed: f64,
    pub noise: f64,
    /// Lateral offset of the waypoint beside the obstacle.
    pub clearance: f64,
}

impl Default for GateRouter {
    fn default() -> Self {
        Self {
            speed: 0.6,
            noise: 0.3,
            clearance: 0.37,
        }
    }
}

impl GateRouter {
    pub fn oracle() -> Self {
        Self {
            speed: 1.0,
            noise: 0.0,
            clearance: 0.42,
        }
    }

    pub fn begin_episode<R: Rng + ?Sized>(&self, _rng: &mut R) -> EpisodeMemory {
        EpisodeMemory::default()
    }

    pub fn act<R: Rng + ?Sized>(
        &self,
        env: &PointMassGate,
        memory: &mut EpisodeMemory,
        state: &[f64],
        _step: usize,
        rng: &mut R,
    ) -> Vec<f64> {
        let p = [state[0], state[1]];
        let c = env.obstacle_center;
        memory.mode = if p[1] >= c[1] { 1 } else { -1 };
        let target = if p[0] < c[0] {
            [c[0], c[1] + memory.mode as f64 * self.clearance]
        } else {
            env.goal
        };
        let d = dist(p, target).max(1e-9);
        let mut a = vec![
            self.speed * (target[0] - p[0]) / d,
            self.speed * (target[1] - p[1]) / d,
        ];
        if self.noise > 0.0 {
            let n = Normal::new(0.0, self.noise).expect("positive noise");
            for x in &mut a {
                *x += n.sample(rng);
            }
        }
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::Env;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_action_keeps_position() {
        let e = PointMassGate::default();
        let s = vec![-0.8, 0.2, 1.0, 0.0];
        let out = e.step(&s, &[0.0, 0.0]);
        assert_eq!(&out.next_state[..2], &s[..2]);
        assert!((out.reward + dist([-0.8, 0.2], e.goal)).abs() < 1e-12);
        assert!(!out.done);
    }

    #[test]
    fn reaching_goal_is_success() {
        let e = PointMassGate::default();
        let out = e.step(&[0.95, 0.0, 1.0, 0.0], &[0.5, 0.0]);
        assert!(out.success && out.done);
    }

    #[test]
    fn collision_is_terminal() {
        let e = PointMassGate::default();
        let out = e.step(&[-0.35, 0.0, 1.0, 0.0], &[1.0, 0.0]);
        assert!(out.done && !out.success);
        assert_eq!(out.reward, -e.collision_penalty);
    }

    #[test]
    fn reset_spread_matches_declared_variance() {
        let e = PointMassGate::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<f64> = (0..10_000).map(|_| e.reset(&mut rng)[0]).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        assert!((var / e.start_variance() - 1.0).abs() < 0.1, "{var}");
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(e.reset(&mut a), e.reset(&mut b));
    }

    #[test]
    fn oracle_router_always_succeeds() {
        let env = Env::PointMassGate(PointMassGate::default());
        let b = env.oracle_behavior();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let mut s = env.reset(&mut rng);
            let mut mem = b.begin_episode(&mut rng);
            let mut ok = false;
            for k in 0..env.spec().horizon {
                let a = b.act(&env, &mut mem, &s, k, &mut rng).unwrap();
                let out = env.step(&s, &a).unwrap();
                s = out.next_state;
                if out.done {
                    ok = out.success;
                    break;
                }
            }
            assert!(ok);
        }
    }

    #[test]
    fn detour_is_longer_than_straight_line() {
        let e = PointMassGate::default();
        let l = e.shortest_path_length([-1.0, 0.0]);
        assert!(l > 1.9 && l < 2.1, "{l}");
        assert!(e.return_bound([-1.0, 0.0]) < 0.0);
    }
}
