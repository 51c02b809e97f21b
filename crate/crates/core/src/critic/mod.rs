//! Twin Q-networks with clipped double-Q targets, Polyak-averaged target
//! copies, action gradients and the ensemble-disagreement statistic.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{
    ema_update, no_times, DenseArray, Mlp, MlpSpec, NormPlacement, OptimState, Scalar, TensorPack,
};
use crate::error::{config, domain, shape, Result};
use crate::flowmap::{gaussian, FlowMapPolicy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticArch {
    pub hidden: Vec<usize>,
    pub layer_norm: Option<NormPlacement>,
}

impl Default for CriticArch {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            layer_norm: Some(NormPlacement::PreActivation),
        }
    }
}

/// Which of the four networks to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Q1,
    Q2,
    Target1,
    Target2,
}

/// Per-sample disagreement `|Q1 - Q2| / sqrt(2)` and its batch-normalized form.
#[derive(Clone, Debug, PartialEq)]
pub struct DisagreementStats {
    pub delta: Vec<f64>,
    pub mean: f64,
    pub normalized: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct CriticEnsemble<T: Scalar = f32> {
    q1: Mlp<T>,
    q2: Mlp<T>,
    tq1: Mlp<T>,
    tq2: Mlp<T>,
    gamma: f64,
    tau: f64,
    state_dim: usize,
    action_dim: usize,
}

/// Both critic losses with their gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticLoss<T> {
    pub value: f64,
    pub grads1: Vec<T>,
    pub grads2: Vec<T>,
}

pub fn clamp_actions<T: Scalar>(a: &mut DenseArray<T>) {
    for x in a.as_mut_slice() {
        *x = x.max(-T::ONE).min(T::ONE);
    }
}

impl<T: Scalar> CriticEnsemble<T> {
    pub fn spec_for(state_dim: usize, action_dim: usize, arch: &CriticArch) -> MlpSpec {
        MlpSpec {
            input_width: state_dim + action_dim,
            time_axes: 0,
            time_features: 0,
            max_frequency: 1.0,
            hidden: arch.hidden.clone(),
            output_width: 1,
            layer_norm: arch.layer_norm,
        }
    }

    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        arch: &CriticArch,
        gamma: f64,
        tau: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let spec = Self::spec_for(state_dim, action_dim, arch);
        let q1 = Mlp::new(spec.clone(), rng)?;
        let q2 = Mlp::new(spec, rng)?;
        Self::from_nets(q1, q2, gamma, tau, state_dim)
    }

    /// Ensemble from two online networks; targets start as copies.
    pub fn from_nets(
        q1: Mlp<T>,
        q2: Mlp<T>,
        gamma: f64,
        tau: f64,
        state_dim: usize,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return config(format!("discount must lie in [0, 1), got {gamma}"));
        }
        if !(tau > 0.0 && tau <= 1.0) {
            return config(format!("Polyak rate must lie in (0, 1], got {tau}"));
        }
        if q1.spec() != q2.spec()
            || q1.spec().output_width != 1
            || q1.spec().input_width <= state_dim
        {
            return config("critics must share a spec mapping [s, a] to a scalar");
        }
        let action_dim = q1.spec().input_width - state_dim;
        Ok(Self {
            tq1: q1.clone(),
            tq2: q2.clone(),
            q1,
            q2,
            gamma,
            tau,
            state_dim,
            action_dim,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn net(&self, head: Head) -> &Mlp<T> {
        match head {
            Head::Q1 => &self.q1,
            Head::Q2 => &self.q2,
            Head::Target1 => &self.tq1,
            Head::Target2 => &self.tq2,
        }
    }

    pub fn net_mut(&mut self, head: Head) -> &mut Mlp<T> {
        match head {
            Head::Q1 => &mut self.q1,
            Head::Q2 => &mut self.q2,
            Head::Target1 => &mut self.tq1,
            Head::Target2 => &mut self.tq2,
        }
    }

    pub fn cast<U: Scalar>(&self) -> CriticEnsemble<U> {
        CriticEnsemble {
            q1: self.q1.cast(),
            q2: self.q2.cast(),
            tq1: self.tq1.cast(),
            tq2: self.tq2.cast(),
            gamma: self.gamma,
            tau: self.tau,
            state_dim: self.state_dim,
            action_dim: self.action_dim,
        }
    }

    const PREFIXES: [(&'static str, Head); 4] = [
        ("critic.q1.", Head::Q1),
        ("critic.q2.", Head::Q2),
        ("critic.tq1.", Head::Target1),
        ("critic.tq2.", Head::Target2),
    ];

    pub fn export(&self, pack: &mut TensorPack) -> Result<()> {
        for (prefix, head) in Self::PREFIXES {
            self.net(head).export(prefix, pack)?;
        }
        Ok(())
    }

    pub fn import(&mut self, pack: &TensorPack) -> Result<()> {
        for (prefix, head) in Self::PREFIXES {
            self.net_mut(head).import(prefix, pack)?;
        }
        Ok(())
    }

    fn inputs(&self, states: &DenseArray<T>, actions: &DenseArray<T>) -> Result<DenseArray<T>> {
        states.ensure_shape(states.rows(), self.state_dim, "critic states")?;
        actions.ensure_shape(states.rows(), self.action_dim, "critic actions")?;
        DenseArray::hstack(&[states, actions])
    }

    pub fn q(&self, head: Head, states: &DenseArray<T>, actions: &DenseArray<T>) -> Result<Vec<T>> {
        let x = self.inputs(states, actions)?;
        let out = self.net(head).forward(&x, &no_times(x.rows()))?;
        out.check_finite("critic output")?;
        Ok(out.into_vec())
    }

    /// Elementwise minimum of the two online critics.
    pub fn q_min(&self, states: &DenseArray<T>, actions: &DenseArray<T>) -> Result<Vec<T>> {
        let a = self.q(Head::Q1, states, actions)?;
        let b = self.q(Head::Q2, states, actions)?;
        Ok(a.into_iter().zip(b).map(|(x, y)| x.min(y)).collect())
    }

    /// `y = r + gamma (1 - done) min_j Qbar_j(s', a')` for given next actions.
    pub fn td_target(
        &self,
        rewards: &[T],
        next_states: &DenseArray<T>,
        dones: &[T],
        next_actions: &DenseArray<T>,
    ) -> Result<Vec<T>> {
        let n = next_states.rows();
        if rewards.len() != n || dones.len() != n {
            return shape(format!(
                "td target: {n} next states, {} rewards, {} dones",
                rewards.len(),
                dones.len()
            ));
        }
        let t1 = self.q(Head::Target1, next_states, next_actions)?;
        let t2 = self.q(Head::Target2, next_states, next_actions)?;
        let g = T::of(self.gamma);
        Ok((0..n)
            .map(|i| rewards[i] + g * (T::ONE - dones[i]) * t1[i].min(t2[i]))
            .collect())
    }

    /// TD target with next actions drawn by the one-step flow map and clamped to the box.
    pub fn td_target_with_policy<R: Rng + ?Sized>(
        &self,
        rewards: &[T],
        next_states: &DenseArray<T>,
        dones: &[T],
        policy: &FlowMapPolicy<T>,
        rng: &mut R,
    ) -> Result<Vec<T>> {
        let a0 = gaussian(rng, next_states.rows(), self.action_dim);
        let mut next = policy.sample_one_step(next_states, &a0)?;
        clamp_actions(&mut next);
        self.td_target(rewards, next_states, dones, &next)
    }

    /// `sum_j mean_i (Q_j(s_i, a_i) - y_i)^2` with gradients for both online critics.
    pub fn critic_loss(
        &self,
        states: &DenseArray<T>,
        actions: &DenseArray<T>,
        y: &[T],
    ) -> Result<CriticLoss<T>> {
        let x = self.inputs(states, actions)?;
        let n = x.rows();
        if y.len() != n {
            return shape(format!("{n} samples but {} targets", y.len()));
        }
        let times = no_times(n);
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(2);
        for net in [&self.q1, &self.q2] {
            let (out, tape) = net.forward_taped(&x, &times, None)?;
            let mut g = out.value.clone();
            for (gi, &yi) in g.as_mut_slice().iter_mut().zip(y) {
                let diff = *gi - yi;
                total += diff.to_f64() * diff.to_f64() / n as f64;
                *gi = T::of(2.0 / n as f64) * diff;
            }
            let mut grad = vec![T::ZERO; net.num_params()];
            net.backward(&tape, &g, None, &mut grad, false)?;
            grads.push(grad);
        }
        if !total.is_finite() {
            return crate::error::numeric(format!("critic loss is not finite ({total})"));
        }
        let grads2 = grads.pop().expect("two critics");
        let grads1 = grads.pop().expect("two critics");
        Ok(CriticLoss {
            value: total,
            grads1,
            grads2,
        })
    }

    /// One optimizer step on both online critics followed by the Polyak update.
    pub fn update(
        &mut self,
        states: &DenseArray<T>,
        actions: &DenseArray<T>,
        y: &[T],
        opt1: &mut OptimState,
        opt2: &mut OptimState,
    ) -> Result<f64> {
        let l = self.critic_loss(states, actions, y)?;
        opt1.step(self.q1.params_mut(), &l.grads1)?;
        opt2.step(self.q2.params_mut(), &l.grads2)?;
        self.update_targets()?;
        Ok(l.value)
    }

    pub fn update_targets(&mut self) -> Result<()> {
        ema_update(self.tq1.params_mut(), self.q1.params(), self.tau)?;
        ema_update(self.tq2.params_mut(), self.q2.params(), self.tau)
    }

    /// `grad_a Q(s, a)` for one head, row-wise.
    pub fn action_gradient(
        &self,
        head: Head,
        states: &DenseArray<T>,
        actions: &DenseArray<T>,
    ) -> Result<DenseArray<T>> {
        let x = self.inputs(states, actions)?;
        let ones = DenseArray::filled(vec![x.rows(), 1], T::ONE);
        let g = self
            .net(head)
            .input_gradient(&x, &no_times(x.rows()), &ones)?;
        let ga = g.columns(self.state_dim, self.action_dim);
        ga.check_finite("critic action gradient")?;
        Ok(ga)
    }

    /// `grad_a Q1(s, a)`.
    pub fn q_gradient(
        &self,
        states: &DenseArray<T>,
        actions: &DenseArray<T>,
    ) -> Result<DenseArray<T>> {
        self.action_gradient(Head::Q1, states, actions)
    }

    /// Disagreement between the online critics, normalized by the batch mean plus `kappa2`.
    pub fn disagreement(
        &self,
        states: &DenseArray<T>,
        actions: &DenseArray<T>,
        kappa2: f64,
    ) -> Result<DisagreementStats> {
        if states.rows() == 0 {
            return domain("disagreement of an empty batch");
        }
        let a = self.q(Head::Q1, states, actions)?;
        let b = self.q(Head::Q2, states, actions)?;
        Ok(disagreement_from(&a, &b, kappa2))
    }
}

/// Disagreement statistics for precomputed critic values.
pub fn disagreement_from<T: Scalar>(q1: &[T], q2: &[T], kappa2: f64) -> DisagreementStats {
    let delta: Vec<f64> = q1
        .iter()
        .zip(q2)
        .map(|(a, b)| (a.to_f64() - b.to_f64()).abs() / std::f64::consts::SQRT_2)
        .collect();
    let mean = delta.iter().sum::<f64>() / delta.len().max(1) as f64;
    let normalized = delta.iter().map(|d| d / (mean + kappa2)).collect();
    DisagreementStats {
        delta,
        mean,
        normalized,
    }
}
