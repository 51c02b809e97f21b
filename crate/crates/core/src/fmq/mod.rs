//! Trust-region Q-guidance: the closed-form steering target, the adaptive
//! radius and the online regression loss.

pub mod kkt;
mod online;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::critic::{clamp_actions, CriticEnsemble, Head};
use crate::diffcore::{DenseArray, Scalar};
use crate::error::{config, numeric, Result};
use crate::flowmap::{gaussian, FlowMapPolicy};

pub use kkt::{closed_form_step, kkt_oracle, KktVerdict, MlpQ, QModel, QuadraticQ};
pub use online::{online_step, EpisodeEnd, OnlineDiagnostics, OnlineState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrustRegionConfig {
    /// Base radius. Zero pins the online policy to the offline one.
    pub eta: f64,
    /// Sensitivity of the radius to critic disagreement.
    pub beta: f64,
    /// Floor added to the gradient norm.
    pub kappa1: f64,
    /// Floor added to the mean disagreement.
    pub kappa2: f64,
}

impl Default for TrustRegionConfig {
    fn default() -> Self {
        Self {
            eta: 0.3,
            beta: 0.3,
            kappa1: 1e-6,
            kappa2: 1e-6,
        }
    }
}

impl TrustRegionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return config(format!(
                "eta must be finite and non-negative, got {}",
                self.eta
            ));
        }
        if !(self.beta >= 0.0) {
            return config(format!("beta must be non-negative, got {}", self.beta));
        }
        if !(self.kappa1 > 0.0 && self.kappa2 > 0.0) {
            return config("kappa1 and kappa2 must be positive");
        }
        Ok(())
    }
}

/// `eta / (1 + beta * delta_tilde)`.
pub fn eta_effective(delta_tilde: f64, cfg: &TrustRegionConfig) -> f64 {
    if cfg.beta.is_infinite() {
        return if delta_tilde > 0.0 { 0.0 } else { cfg.eta };
    }
    cfg.eta / (1.0 + cfg.beta * delta_tilde)
}

/// `u_ref + eta_eff * g / (|g| + kappa1)`.
pub fn trust_region_target<T: Scalar>(
    u_ref: &[T],
    q_grad: &[T],
    eta_eff: f64,
    kappa1: f64,
) -> Result<Vec<T>> {
    if u_ref.len() != q_grad.len() {
        return crate::error::shape(format!(
            "{} velocity vs {} gradient components",
            u_ref.len(),
            q_grad.len()
        ));
    }
    if !eta_eff.is_finite() || u_ref.iter().chain(q_grad).any(|v| !v.is_finite()) {
        return numeric("trust-region target received non-finite input");
    }
    let norm = q_grad
        .iter()
        .map(|g| g.to_f64().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm == 0.0 || eta_eff == 0.0 {
        return Ok(u_ref.to_vec());
    }
    let scale = eta_eff / (norm + kappa1);
    Ok(u_ref
        .iter()
        .zip(q_grad)
        .map(|(&u, &g)| T::of(u.to_f64() + scale * g.to_f64()))
        .collect())
}

/// Loss value, gradient and the batch statistics reported by the online loop.
#[derive(Clone, Debug, PartialEq)]
pub struct FmqLoss<T> {
    pub value: f64,
    pub grads: Vec<T>,
    pub eta_eff_mean: f64,
    /// Mean `|u_online - u_offline|` over the batch before the update.
    pub displacement_mean: f64,
}

/// The online regression: interpolate noise and buffer actions at
/// `r ~ U[0,1)`, complete with the frozen offline map, steer with the
/// normalized `grad_a Q1` inside the adaptive radius and regress the
/// online `u_{r,1}` onto that target.
pub fn fmq_loss<T: Scalar, R: Rng + ?Sized>(
    online: &FlowMapPolicy<T>,
    offline: &FlowMapPolicy<T>,
    critics: &CriticEnsemble<T>,
    states: &DenseArray<T>,
    a_data: &DenseArray<T>,
    cfg: &TrustRegionConfig,
    rng: &mut R,
) -> Result<FmqLoss<T>> {
    let n = states.rows();
    let d = online.action_dim();
    let a0 = gaussian::<T, _>(rng, n, d);
    let r: Vec<T> = (0..n).map(|_| T::of(rng.random::<f64>())).collect();
    let ones = vec![T::ONE; n];
    let mut a_r = a0.clone();
    for i in 0..n {
        for (x, &y) in a_r.row_mut(i).iter_mut().zip(a_data.row(i)) {
            *x = (T::ONE - r[i]) * *x + r[i] * y;
        }
    }
    let u_off = offline.velocity(states, &a_r, &r, &ones)?;
    let mut a1 = a_r.clone();
    for i in 0..n {
        for (x, &u) in a1.row_mut(i).iter_mut().zip(u_off.row(i)) {
            *x += (T::ONE - r[i]) * u;
        }
    }
    clamp_actions(&mut a1);

    let mut target = u_off.clone();
    let mut eta_sum = 0.0;
    if cfg.eta > 0.0 {
        let grad = critics.action_gradient(Head::Q1, states, &a1)?;
        let stats = critics.disagreement(states, &a1, cfg.kappa2)?;
        for i in 0..n {
            let eta_eff = eta_effective(stats.normalized[i], cfg);
            eta_sum += eta_eff;
            let row = trust_region_target(u_off.row(i), grad.row(i), eta_eff, cfg.kappa1)?;
            target.row_mut(i).copy_from_slice(&row);
        }
    }

    let net = online.net();
    let inputs = DenseArray::hstack(&[states, &a_r])?;
    let times = DenseArray::matrix(n, 2, r.iter().flat_map(|&x| [x, T::ONE]).collect())?;
    let (out, tape) = net.forward_taped(&inputs, &times, None)?;
    let mut g = out.value.clone();
    let mut total = 0.0;
    let mut disp = 0.0;
    let scale = T::of(2.0 / n as f64);
    for i in 0..n {
        let mut di = 0.0;
        for k in 0..d {
            let idx = i * d + k;
            let u = out.value.as_slice()[idx];
            let diff = u - target.as_slice()[idx];
            total += diff.to_f64().powi(2);
            di += (u - u_off.as_slice()[idx]).to_f64().powi(2);
            g.as_mut_slice()[idx] = scale * diff;
        }
        disp += di.sqrt();
    }
    let value = total / n as f64;
    if !value.is_finite() {
        return numeric(format!("fmq loss is not finite ({value})"));
    }
    let mut grads = vec![T::ZERO; net.num_params()];
    net.backward(&tape, &g, None, &mut grads, false)?;
    Ok(FmqLoss {
        value,
        grads,
        eta_eff_mean: eta_sum / n as f64,
        displacement_mean: disp / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::CriticArch;
    use crate::diffcore::{Mlp, MlpSpec, OptimState};
    use crate::flowmap::PolicyArch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn target_arithmetic() {
        let u = trust_region_target(&[0.0f64, 0.0], &[3.0, 4.0], 1.0, 1e-15).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-12 && (u[1] - 0.8).abs() < 1e-12);
        assert_eq!(
            trust_region_target(&[0.5f64, 1.0], &[3.0, 4.0], 0.0, 1e-6).unwrap(),
            vec![0.5, 1.0]
        );
        assert_eq!(
            trust_region_target(&[0.5f64, 1.0], &[0.0, 0.0], 1.0, 1e-6).unwrap(),
            vec![0.5, 1.0]
        );
        assert!(trust_region_target(&[f64::NAN], &[1.0], 1.0, 1e-6).is_err());
    }

    #[test]
    fn constraint_is_active_or_strictly_inside() {
        let g = [0.3f64, -0.1, 2.0];
        let u_ref = [0.1, 0.2, 0.3];
        let active = closed_form_step(&u_ref, &g, 0.5).unwrap();
        let r: f64 = active
            .iter()
            .zip(&u_ref)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((r - 0.5).abs() < 1e-12);
        let soft = trust_region_target(&u_ref, &g, 0.5, 1e-3).unwrap();
        let r: f64 = soft
            .iter()
            .zip(&u_ref)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(r < 0.5);
    }

    #[test]
    fn effective_radius() {
        let cfg = TrustRegionConfig {
            eta: 1.0,
            beta: 0.3,
            ..Default::default()
        };
        assert_eq!(eta_effective(0.0, &cfg), 1.0);
        assert!((eta_effective(1.0, &cfg) - 0.769_230_769).abs() < 1e-9);
        assert!(eta_effective(0.5, &cfg) > eta_effective(0.6, &cfg));
        let flat = TrustRegionConfig { beta: 0.0, ..cfg };
        assert_eq!(eta_effective(7.0, &flat), 1.0);
    }

    fn fixtures(
        seed: u64,
    ) -> (
        FlowMapPolicy<f64>,
        CriticEnsemble<f64>,
        DenseArray<f64>,
        DenseArray<f64>,
        ChaCha8Rng,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = PolicyArch {
            hidden: vec![16, 16],
            time_features: 4,
            max_frequency: 4.0,
        };
        let p = FlowMapPolicy::new(2, 2, &arch, &mut rng).unwrap();
        let c = CriticEnsemble::new(2, 2, &CriticArch::default(), 0.9, 0.01, &mut rng).unwrap();
        let s = gaussian(&mut rng, 64, 2);
        let a = gaussian::<f64, _>(&mut rng, 64, 2).map(|x| x.clamp(-1.0, 1.0));
        (p, c, s, a, rng)
    }

    #[test]
    fn loss_at_onset_is_squared_radius() {
        let (p, c, s, a, mut rng) = fixtures(1);
        let cfg = TrustRegionConfig {
            eta: 0.3,
            beta: 0.0,
            kappa1: 1e-9,
            kappa2: 1e-6,
        };
        let l = fmq_loss(&p, &p, &c, &s, &a, &cfg, &mut rng).unwrap();
        assert!((l.value - 0.09).abs() < 1e-6, "{}", l.value);
        assert_eq!(l.displacement_mean, 0.0);
        assert!((l.eta_eff_mean - 0.3).abs() < 1e-12);
    }

    #[test]
    fn zero_radius_gives_zero_gradient() {
        let (p, c, s, a, mut rng) = fixtures(2);
        let cfg = TrustRegionConfig {
            eta: 0.0,
            ..Default::default()
        };
        let l = fmq_loss(&p, &p, &c, &s, &a, &cfg, &mut rng).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn target_branch_carries_no_gradient() {
        // Perturbing the frozen offline map changes the target, but the
        // gradient is exactly the regression gradient onto that target.
        let (p, c, s, a, _) = fixtures(3);
        let cfg = TrustRegionConfig::default();
        let mut rng1 = ChaCha8Rng::seed_from_u64(9);
        let l = fmq_loss(&p, &p, &c, &s, &a, &cfg, &mut rng1).unwrap();
        let h = 1e-5;
        let mut rng_probe = ChaCha8Rng::seed_from_u64(10);
        for i in rand::seq::index::sample(&mut rng_probe, p.net().num_params(), 24) {
            let mut up = p.clone();
            up.net_mut().params_mut()[i] += h;
            let mut dn = p.clone();
            dn.net_mut().params_mut()[i] -= h;
            let fu = fmq_loss(&up, &p, &c, &s, &a, &cfg, &mut ChaCha8Rng::seed_from_u64(9))
                .unwrap()
                .value;
            let fd = fmq_loss(&dn, &p, &c, &s, &a, &cfg, &mut ChaCha8Rng::seed_from_u64(9))
                .unwrap()
                .value;
            let num = (fu - fd) / (2.0 * h);
            assert!(
                (l.grads[i] - num).abs() < 1e-6 * num.abs().max(1.0),
                "{} vs {num}",
                l.grads[i]
            );
        }
    }

    #[test]
    fn converged_displacement_matches_radius() {
        // Fixed critic Q(s, a) = <w, a>: the target shift is constant so the
        // online map converges to a displacement of eta_eff.
        let (p, _, s, a, mut rng) = fixtures(4);
        let spec = MlpSpec {
            input_width: 4,
            time_axes: 0,
            time_features: 0,
            max_frequency: 1.0,
            hidden: vec![],
            output_width: 1,
            layer_norm: None,
        };
        let mut q = Mlp::<f64>::zeros(spec).unwrap();
        q.set_layer(0, &[0.0, 0.0, 1.0, -0.5], &[0.0]).unwrap();
        let c = CriticEnsemble::from_nets(q.clone(), q, 0.9, 0.01, 2).unwrap();
        let cfg = TrustRegionConfig {
            eta: 0.3,
            beta: 0.3,
            kappa1: 1e-6,
            kappa2: 1e-6,
        };
        let mut online = p.clone();
        let mut opt = OptimState::new(online.net().num_params(), 3e-3);
        let mut last = 0.0;
        for _ in 0..1500 {
            let l = fmq_loss(&online, &p, &c, &s, &a, &cfg, &mut rng).unwrap();
            opt.step(online.net_mut().params_mut(), &l.grads).unwrap();
            last = l.displacement_mean / l.eta_eff_mean;
        }
        assert!((last - 1.0).abs() < 0.1, "displacement / eta_eff = {last}");
    }
}
