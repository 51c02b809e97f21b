use rand::Rng;

use super::{fmq_loss, TrustRegionConfig};
use crate::critic::{clamp_actions, CriticEnsemble};
use crate::diffcore::{DenseArray, OptimState};
use crate::envs::{Env, Transition};
use crate::error::{config, Result};
use crate::flowmap::{gaussian, loss, Curriculum, FlowBatch, FlowMapPolicy, Objective};
use crate::harness::ReplayBuffer;

/// Everything the online loop mutates, plus the frozen offline actor.
#[derive(Clone, Debug)]
pub struct OnlineState {
    pub online: FlowMapPolicy<f32>,
    offline: FlowMapPolicy<f32>,
    pub critics: CriticEnsemble<f32>,
    pub actor_opt: OptimState,
    pub critic_opts: (OptimState, OptimState),
    pub buffer: ReplayBuffer,
    pub env: Env,
    pub trust: TrustRegionConfig,
    pub batch_size: usize,
    /// Weight of the diagonal flow-matching loss kept alongside the FMQ
    /// regression; zero trains on the FMQ loss alone.
    pub diag_weight: f64,
    state: Vec<f64>,
    episode_step: usize,
    episode_return: f64,
    pub steps: u64,
}

/// Outcome of an episode that ended during a step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeEnd {
    pub ret: f64,
    pub success: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OnlineDiagnostics {
    pub critic_loss: f64,
    pub fmq_loss: f64,
    pub eta_eff_mean: f64,
    pub displacement_mean: f64,
    pub episode: Option<EpisodeEnd>,
}

impl OnlineState {
    /// Starts the online phase. The offline actor is copied and frozen here.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        policy: FlowMapPolicy<f32>,
        critics: CriticEnsemble<f32>,
        buffer: ReplayBuffer,
        env: Env,
        trust: TrustRegionConfig,
        batch_size: usize,
        actor_lr: f64,
        critic_lr: f64,
        rng: &mut R,
    ) -> Result<Self> {
        trust.validate()?;
        if batch_size == 0 {
            return config("batch size must be positive");
        }
        let spec = env.spec();
        if spec.state_dim != policy.state_dim() || spec.action_dim != policy.action_dim() {
            return config(format!(
                "policy dims do not match environment {}",
                spec.name
            ));
        }
        let state = env.reset(rng);
        let n_actor = policy.net().num_params();
        let n_critic = critics.net(crate::critic::Head::Q1).num_params();
        Ok(Self {
            offline: policy.clone(),
            online: policy,
            critics,
            actor_opt: OptimState::new(n_actor, actor_lr),
            critic_opts: (
                OptimState::new(n_critic, critic_lr),
                OptimState::new(n_critic, critic_lr),
            ),
            buffer,
            env,
            trust,
            batch_size,
            diag_weight: 0.0,
            state,
            episode_step: 0,
            episode_return: 0.0,
            steps: 0,
        })
    }

    pub fn offline(&self) -> &FlowMapPolicy<f32> {
        &self.offline
    }
}

/// One pass of the online loop: act with the one-step sampler, store the
/// transition, one critic update and one FMQ actor update.
pub fn online_step<R: Rng + ?Sized>(
    st: &mut OnlineState,
    rng: &mut R,
) -> Result<OnlineDiagnostics> {
    let spec = st.env.spec();
    let s = DenseArray::matrix(
        1,
        spec.state_dim,
        st.state.iter().map(|&v| v as f32).collect(),
    )?;
    let a0 = gaussian::<f32, _>(rng, 1, spec.action_dim);
    let mut a = st.online.sample_one_step(&s, &a0)?;
    clamp_actions(&mut a);
    let action: Vec<f64> = a.as_slice().iter().map(|&v| v as f64).collect();
    let out = st.env.step(&st.state, &action)?;
    st.buffer.push(&Transition {
        state: st.state.clone(),
        action,
        reward: out.reward,
        next_state: out.next_state.clone(),
        done: out.done,
    })?;
    st.episode_step += 1;
    st.episode_return += out.reward;
    let mut episode = None;
    if out.done || st.episode_step >= spec.horizon {
        episode = Some(EpisodeEnd {
            ret: st.episode_return,
            success: out.success,
        });
        st.state = st.env.reset(rng);
        st.episode_step = 0;
        st.episode_return = 0.0;
    } else {
        st.state = out.next_state;
    }

    let b = st.buffer.sample(st.batch_size, rng)?;
    let y =
        st.critics
            .td_target_with_policy(&b.rewards, &b.next_states, &b.dones, &st.online, rng)?;
    let (o1, o2) = &mut st.critic_opts;
    let critic_loss = st.critics.update(&b.states, &b.actions, &y, o1, o2)?;

    let mut l = fmq_loss(
        &st.online,
        &st.offline,
        &st.critics,
        &b.states,
        &b.actions,
        &st.trust,
        rng,
    )?;
    if st.diag_weight > 0.0 {
        let batch = FlowBatch::sample(
            rng,
            b.states,
            b.actions,
            0,
            &Curriculum {
                warmup: u64::MAX,
                anneal: 0,
            },
        )?;
        let diag = loss(&st.online, &batch, Objective::Diag)?;
        let w = st.diag_weight as f32;
        for (g, d) in l.grads.iter_mut().zip(&diag.grads) {
            *g += w * d;
        }
    }
    st.actor_opt
        .step(st.online.net_mut().params_mut(), &l.grads)?;
    st.steps += 1;
    Ok(OnlineDiagnostics {
        critic_loss,
        fmq_loss: l.value,
        eta_eff_mean: l.eta_eff_mean,
        displacement_mean: l.displacement_mean,
        episode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::{CriticArch, Head};
    use crate::envs::generate_offline_dataset;
    use crate::flowmap::PolicyArch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(lr: f64) -> (OnlineState, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let env = Env::by_name("point_mass_gate").unwrap();
        let data = generate_offline_dataset(&env, &env.behavior(), 5, &mut rng).unwrap();
        let buffer = ReplayBuffer::from_dataset(&data, 1000).unwrap();
        let arch = PolicyArch {
            hidden: vec![16],
            ..Default::default()
        };
        let policy = FlowMapPolicy::new(4, 2, &arch, &mut rng).unwrap();
        let carch = CriticArch {
            hidden: vec![16],
            ..Default::default()
        };
        let critics = CriticEnsemble::new(4, 2, &carch, 0.99, 0.005, &mut rng).unwrap();
        let st = OnlineState::new(
            policy,
            critics,
            buffer,
            env,
            TrustRegionConfig::default(),
            32,
            lr,
            lr,
            &mut rng,
        )
        .unwrap();
        (st, rng)
    }

    #[test]
    fn zero_learning_rates_only_grow_the_buffer() {
        let (mut st, mut rng) = setup(0.0);
        let (p, q) = (
            st.online.net().params().to_vec(),
            st.critics.net(Head::Q1).params().to_vec(),
        );
        let n = st.buffer.len();
        for _ in 0..10 {
            online_step(&mut st, &mut rng).unwrap();
        }
        assert_eq!(st.online.net().params(), &p[..]);
        assert_eq!(st.critics.net(Head::Q1).params(), &q[..]);
        assert_eq!(st.buffer.len(), n + 10);
    }

    #[test]
    fn offline_anchor_is_frozen_and_onset_displacement_is_zero() {
        let (mut st, mut rng) = setup(1e-3);
        let frozen = st.offline().net().params().to_vec();
        let first = online_step(&mut st, &mut rng).unwrap();
        assert_eq!(first.displacement_mean, 0.0);
        for _ in 0..20 {
            online_step(&mut st, &mut rng).unwrap();
        }
        assert_eq!(st.offline().net().params(), &frozen[..]);
        assert_ne!(st.online.net().params(), &frozen[..]);
    }
}
