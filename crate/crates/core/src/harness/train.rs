use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::eval::{evaluate, EvalReport, Sampler};
use super::{ReplayBuffer, RunConfig};
use crate::critic::{CriticEnsemble, Head};
use crate::diffcore::{Mlp, OptimState, TensorPack, CHECKPOINT_MAGIC};
use crate::envs::{Dataset, Env};
use crate::error::{config, Error, Result};
use crate::flowmap::{offline_actor_loss, FlowBatch, FlowMapPolicy};
use crate::fmq::{online_step, OnlineState};

const OFFLINE_STREAM: u64 = 0;
const ONLINE_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

/// Generator for evaluation episodes. Every evaluation of a run restarts it,
/// so all checkpoints of a seed are scored on the same initial states.
pub fn eval_rng(seed: u64) -> ChaCha8Rng {
    stream(seed, EVAL_STREAM)
}

/// Actor, critics and, after the online phase, the frozen offline actor.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub seed: u64,
    pub phase: String,
    pub step: u64,
    pub policy: FlowMapPolicy<f32>,
    pub critics: CriticEnsemble<f32>,
    pub offline_policy: Option<FlowMapPolicy<f32>>,
}

impl Checkpoint {
    pub fn env(&self) -> Result<Env> {
        Env::by_name(&self.config.env)
    }

    pub fn to_pack(&self) -> Result<TensorPack> {
        let mut pack = TensorPack::new(serde_json::json!({
            "config": self.config,
            "seed": self.seed,
            "phase": self.phase,
            "step": self.step,
            "state_dim": self.policy.state_dim(),
            "action_dim": self.policy.action_dim(),
        }));
        self.policy.export("policy.", &mut pack)?;
        self.critics.export(&mut pack)?;
        if let Some(p) = &self.offline_policy {
            p.export("offline.", &mut pack)?;
        }
        Ok(pack)
    }

    pub fn from_pack(pack: &TensorPack) -> Result<Self> {
        let m = &pack.metadata;
        let bad = |what: &str| Error::Format(format!("checkpoint: missing {what}"));
        let config: RunConfig = serde_json::from_value(m["config"].clone())?;
        let n = m["state_dim"].as_u64().ok_or_else(|| bad("state_dim"))? as usize;
        let d = m["action_dim"].as_u64().ok_or_else(|| bad("action_dim"))? as usize;
        let blank_policy = || -> Result<FlowMapPolicy<f32>> {
            FlowMapPolicy::from_net(
                Mlp::zeros(FlowMapPolicy::<f32>::spec_for(n, d, &config.policy))?,
                n,
            )
        };
        let mut policy = blank_policy()?;
        policy.import("policy.", pack)?;
        let spec = CriticEnsemble::<f32>::spec_for(n, d, &config.critic);
        let mut critics = CriticEnsemble::from_nets(
            Mlp::zeros(spec.clone())?,
            Mlp::zeros(spec)?,
            config.gamma,
            config.tau,
            n,
        )?;
        critics.import(pack)?;
        let offline_policy = if pack.names().any(|k| k.starts_with("offline.")) {
            let mut p = blank_policy()?;
            p.import("offline.", pack)?;
            Some(p)
        } else {
            None
        };
        Ok(Self {
            seed: m["seed"].as_u64().ok_or_else(|| bad("seed"))?,
            phase: m["phase"].as_str().ok_or_else(|| bad("phase"))?.to_string(),
            step: m["step"].as_u64().ok_or_else(|| bad("step"))?,
            config,
            policy,
            critics,
            offline_policy,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_pack()?.save(path, CHECKPOINT_MAGIC)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_pack(&TensorPack::load(path, CHECKPOINT_MAGIC)?)
    }
}

/// Fresh actor and critics for `cfg`, drawn from the seed's offline stream.
pub fn initialize(cfg: &RunConfig, seed: u64) -> Result<(Checkpoint, ChaCha8Rng)> {
    cfg.validate()?;
    let spec = Env::by_name(&cfg.env)?.spec();
    let mut rng = stream(seed, OFFLINE_STREAM);
    let policy = FlowMapPolicy::new(spec.state_dim, spec.action_dim, &cfg.policy, &mut rng)?;
    let critics = CriticEnsemble::new(
        spec.state_dim,
        spec.action_dim,
        &cfg.critic,
        cfg.gamma,
        cfg.tau,
        &mut rng,
    )?;
    let ckpt = Checkpoint {
        config: cfg.clone(),
        seed,
        phase: "init".into(),
        step: 0,
        policy,
        critics,
        offline_policy: None,
    };
    Ok((ckpt, rng))
}

#[derive(Clone, Debug)]
pub struct OfflineRun {
    pub checkpoint: Checkpoint,
    pub actor_losses: Vec<f64>,
    pub critic_losses: Vec<f64>,
    pub evals: Vec<(u64, EvalReport)>,
    /// Set when a numeric fault stopped training; the checkpoint holds the
    /// parameters from the last completed step.
    pub aborted: Option<String>,
}

/// Offline pre-training: per step one critic update on clipped double-Q
/// targets and one actor update on the diagonal plus self-distillation loss.
pub fn train_offline(
    cfg: &RunConfig,
    data: &Dataset,
    seed: u64,
    on_eval: &mut dyn FnMut(u64, &EvalReport),
) -> Result<OfflineRun> {
    if data.is_empty() {
        return config("offline training needs a non-empty dataset");
    }
    let env = Env::by_name(&cfg.env)?;
    if env.name() != data.env {
        return config(format!(
            "dataset was recorded on {} but the config names {}",
            data.env,
            env.name()
        ));
    }
    let (mut ckpt, mut rng) = initialize(cfg, seed)?;
    let buffer = ReplayBuffer::from_dataset(data, data.len())?;
    let mut actor_opt = OptimState::new(ckpt.policy.net().num_params(), cfg.actor_lr);
    let n_critic = ckpt.critics.net(Head::Q1).num_params();
    let (mut o1, mut o2) = (
        OptimState::new(n_critic, cfg.critic_lr),
        OptimState::new(n_critic, cfg.critic_lr),
    );
    let mut run = OfflineRun {
        checkpoint: ckpt.clone(),
        actor_losses: Vec::with_capacity(cfg.offline_steps as usize),
        critic_losses: Vec::with_capacity(cfg.offline_steps as usize),
        evals: Vec::new(),
        aborted: None,
    };
    for step in 0..cfg.offline_steps {
        let outcome = (|| -> Result<(f64, f64)> {
            let b = buffer.sample(cfg.batch_size, &mut rng)?;
            let y = ckpt.critics.td_target_with_policy(
                &b.rewards,
                &b.next_states,
                &b.dones,
                &ckpt.policy,
                &mut rng,
            )?;
            let critic = ckpt
                .critics
                .update(&b.states, &b.actions, &y, &mut o1, &mut o2)?;
            let batch = FlowBatch::sample(&mut rng, b.states, b.actions, step, &cfg.curriculum)?;
            let l = offline_actor_loss(&ckpt.policy, &batch, cfg.variant, cfg.lambda)?;
            actor_opt.step(ckpt.policy.net_mut().params_mut(), &l.grads)?;
            Ok((l.value, critic))
        })();
        match outcome {
            Ok((a, c)) => {
                run.actor_losses.push(a);
                run.critic_losses.push(c);
            }
            Err(Error::Numeric(msg)) => {
                run.aborted = Some(format!("step {step}: {msg}"));
                break;
            }
            Err(e) => return Err(e),
        }
        let done = step + 1;
        ckpt.step = done;
        if done % cfg.eval_interval == 0 || done == cfg.offline_steps {
            let report = evaluate(
                &ckpt.policy,
                &ckpt.critics,
                &env,
                cfg.eval_episodes,
                Sampler::OneStep,
                &mut eval_rng(seed),
            )?;
            on_eval(done, &report);
            run.evals.push((done, report));
        }
    }
    ckpt.phase = "offline".into();
    run.checkpoint = ckpt;
    Ok(run)
}

/// One diagnostics line. Loss and trust-region columns average the steps
/// since the previous line; the evaluation column is filled on eval steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiagnosticsRow {
    pub step: u64,
    pub critic_loss: f64,
    pub fmq_loss: f64,
    pub eta_eff_mean: f64,
    pub displacement_mean: f64,
    pub eval_success_rate: Option<f64>,
}

pub const CSV_HEADER: &str =
    "step,critic_loss,fmq_loss,eta_eff_mean,displacement_mean,eval_success_rate";

/// Diagnostics as CSV with nine significant digits per float.
pub fn diagnostics_csv(rows: &[DiagnosticsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let eval = r
            .eval_success_rate
            .map(|v| format!("{v:.8e}"))
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{:.8e},{:.8e},{:.8e},{:.8e},{}",
            r.step, r.critic_loss, r.fmq_loss, r.eta_eff_mean, r.displacement_mean, eval
        );
    }
    out
}

/// Parses a diagnostics CSV produced by [`diagnostics_csv`].
pub fn parse_diagnostics(text: &str) -> Result<Vec<DiagnosticsRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(Error::Format("diagnostics csv: unexpected header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Format(format!("diagnostics csv: bad row '{l}'"));
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
            Ok(DiagnosticsRow {
                step: f[0].trim().parse().map_err(|_| bad())?,
                critic_loss: num(f[1])?,
                fmq_loss: num(f[2])?,
                eta_eff_mean: num(f[3])?,
                displacement_mean: num(f[4])?,
                eval_success_rate: if f[5].trim().is_empty() {
                    None
                } else {
                    Some(num(f[5])?)
                },
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct OnlineRun {
    pub checkpoint: Checkpoint,
    pub rows: Vec<DiagnosticsRow>,
    /// Evaluation of the offline checkpoint before any online step.
    pub offline_eval: EvalReport,
    pub final_eval: EvalReport,
    pub episodes: usize,
    pub aborted: Option<String>,
}

impl OnlineRun {
    pub fn csv(&self) -> String {
        diagnostics_csv(&self.rows)
    }

    pub fn lift(&self) -> f64 {
        self.final_eval.success_rate - self.offline_eval.success_rate
    }
}

/// Online adaptation from an offline checkpoint. The replay buffer starts
/// with the offline dataset and the offline actor stays frozen as the
/// trust-region anchor.
pub fn adapt_online(
    cfg: &RunConfig,
    offline: &Checkpoint,
    data: &Dataset,
    on_eval: &mut dyn FnMut(u64, &EvalReport),
) -> Result<OnlineRun> {
    cfg.validate()?;
    let env = Env::by_name(&cfg.env)?;
    let seed = offline.seed;
    let mut rng = stream(seed, ONLINE_STREAM);
    let offline_eval = evaluate(
        &offline.policy,
        &offline.critics,
        &env,
        cfg.eval_episodes,
        Sampler::OneStep,
        &mut eval_rng(seed),
    )?;
    let buffer = ReplayBuffer::from_dataset(data, cfg.buffer_capacity)?;
    let mut st = OnlineState::new(
        offline.policy.clone(),
        offline.critics.clone(),
        buffer,
        env.clone(),
        cfg.trust_region,
        cfg.batch_size,
        cfg.actor_lr,
        cfg.critic_lr,
        &mut rng,
    )?;
    st.diag_weight = cfg.online_diag_weight;
    let mut rows = Vec::new();
    let mut acc = [0.0f64; 4];
    let mut count = 0usize;
    let mut episodes = 0usize;
    let mut last_eval = offline_eval.clone();
    let mut aborted = None;
    for step in 1..=cfg.online_steps {
        let diag = match online_step(&mut st, &mut rng) {
            Ok(d) => d,
            Err(Error::Numeric(msg)) => {
                aborted = Some(format!("step {step}: {msg}"));
                break;
            }
            Err(e) => return Err(e),
        };
        episodes += diag.episode.is_some() as usize;
        for (a, v) in acc.iter_mut().zip([
            diag.critic_loss,
            diag.fmq_loss,
            diag.eta_eff_mean,
            diag.displacement_mean,
        ]) {
            *a += v;
        }
        count += 1;
        let eval_now = step % cfg.eval_interval == 0 || step == cfg.online_steps;
        if step == 1 || eval_now {
            let eval_success_rate = if eval_now {
                last_eval = evaluate(
                    &st.online,
                    &st.critics,
                    &env,
                    cfg.eval_episodes,
                    Sampler::OneStep,
                    &mut eval_rng(seed),
                )?;
                on_eval(step, &last_eval);
                Some(last_eval.success_rate)
            } else {
                None
            };
            let c = count as f64;
            rows.push(DiagnosticsRow {
                step,
                critic_loss: acc[0] / c,
                fmq_loss: acc[1] / c,
                eta_eff_mean: acc[2] / c,
                displacement_mean: acc[3] / c,
                eval_success_rate,
            });
            acc = [0.0; 4];
            count = 0;
        }
    }
    let checkpoint = Checkpoint {
        config: cfg.clone(),
        seed,
        phase: "online".into(),
        step: offline.step + st.steps,
        policy: st.online.clone(),
        critics: st.critics.clone(),
        offline_policy: Some(st.offline().clone()),
    };
    Ok(OnlineRun {
        checkpoint,
        rows,
        offline_eval,
        final_eval: last_eval,
        episodes,
        aborted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::CriticArch;
    use crate::envs::generate_offline_dataset;
    use crate::flowmap::PolicyArch;

    fn tiny() -> (RunConfig, Dataset) {
        let cfg = RunConfig {
            offline_steps: 30,
            online_steps: 25,
            batch_size: 16,
            eval_interval: 10,
            eval_episodes: 4,
            policy: PolicyArch {
                hidden: vec![16],
                ..Default::default()
            },
            critic: CriticArch {
                hidden: vec![16],
                ..Default::default()
            },
            ..Default::default()
        };
        let env = Env::by_name(&cfg.env).unwrap();
        let data =
            generate_offline_dataset(&env, &env.behavior(), 4, &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap();
        (cfg, data)
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let (cfg, data) = tiny();
        let cfg = RunConfig {
            offline_steps: 0,
            ..cfg
        };
        let run = train_offline(&cfg, &data, 3, &mut |_, _| {}).unwrap();
        let (init, _) = initialize(&cfg, 3).unwrap();
        assert_eq!(
            run.checkpoint.policy.net().params(),
            init.policy.net().params()
        );
        assert_eq!(
            run.checkpoint.critics.net(Head::Target2).params(),
            init.critics.net(Head::Target2).params()
        );
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let (cfg, mut data) = tiny();
        data.transitions.clear();
        assert!(train_offline(&cfg, &data, 0, &mut |_, _| {}).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_and_online_phase() {
        let (cfg, data) = tiny();
        let off = train_offline(&cfg, &data, 1, &mut |_, _| {}).unwrap();
        assert_eq!(off.actor_losses.len(), 30);
        assert_eq!(
            off.evals.iter().map(|e| e.0).collect::<Vec<_>>(),
            vec![10, 20, 30]
        );
        let bytes = off
            .checkpoint
            .to_pack()
            .unwrap()
            .to_bytes(CHECKPOINT_MAGIC)
            .unwrap();
        let back =
            Checkpoint::from_pack(&TensorPack::from_bytes(&bytes, CHECKPOINT_MAGIC).unwrap())
                .unwrap();
        assert_eq!(
            back.policy.net().params(),
            off.checkpoint.policy.net().params()
        );
        assert_eq!(
            back.critics.net(Head::Target1).params(),
            off.checkpoint.critics.net(Head::Target1).params()
        );
        assert!(back.offline_policy.is_none());

        let on = adapt_online(&cfg, &back, &data, &mut |_, _| {}).unwrap();
        let steps: Vec<u64> = on.rows.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![1, 10, 20, 25]);
        assert!(on.rows[0].eval_success_rate.is_none() && on.rows[3].eval_success_rate.is_some());
        assert_eq!(on.rows[0].displacement_mean, 0.0);
        let frozen = on.checkpoint.offline_policy.as_ref().unwrap();
        assert_eq!(frozen.net().params(), off.checkpoint.policy.net().params());
        let parsed = parse_diagnostics(&on.csv()).unwrap();
        assert_eq!(parsed.len(), on.rows.len());
        assert_eq!(diagnostics_csv(&parsed), on.csv());
    }

    #[test]
    fn zero_radius_pins_the_policy() {
        let (cfg, data) = tiny();
        let off = train_offline(&cfg, &data, 2, &mut |_, _| {}).unwrap();
        let mut cfg0 = cfg.clone();
        cfg0.trust_region.eta = 0.0;
        let on = adapt_online(&cfg0, &off.checkpoint, &data, &mut |_, _| {}).unwrap();
        assert_eq!(
            on.checkpoint.policy.net().params(),
            off.checkpoint.policy.net().params()
        );
        assert_eq!(on.lift(), 0.0);
    }
}
