use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use flowmapq::envs::{generate_offline_dataset, Dataset, Env};
use flowmapq::harness::{
    adapt_online, autodiff_suite, diagnostics_svg, equivalence_suite, eval_rng, evaluate,
    kkt_suite, parse_diagnostics, sampler_consistency_check, semigroup_check, train_offline,
    Checkpoint, RunConfig, Sampler, SuiteReport,
};
use flowmapq::qgbs::Scoring;

#[derive(Parser)]
#[command(
    name = "flowmapq",
    version,
    about = "Flow-map policies with trust-region Q-guidance"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the scripted behavior policy and save an offline dataset.
    GenData {
        /// point_mass_gate or modal_bandit
        env: String,
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Offline pre-training from a dataset.
    TrainOffline {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset file; falls back to the config's `data` entry.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to the first entry of the config's `seeds`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Online fine-tuning from an offline checkpoint; writes a checkpoint and a diagnostics CSV.
    AdaptOnline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset that preloads the replay buffer; falls back to the config's `data` entry.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Diagnostics CSV path, default `<out>.csv`.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Evaluate a checkpoint with a chosen sampler; prints a JSON report.
    Eval(EvalArgs),
    /// Run the built-in consistency suites.
    Verify {
        /// Fewer instances and samples, for a fast smoke check.
        #[arg(long)]
        quick: bool,
        /// Trained checkpoint for the semigroup and sampler-consistency checks.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Render a diagnostics CSV as SVG line charts.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// one-step, best-of-n, qgbs or euler
    #[arg(long, default_value = "one-step")]
    sampler: String,
    /// Candidates for best-of-n, steps for euler.
    #[arg(long)]
    n: Option<usize>,
    /// Defaults to the checkpoint config's `eval_episodes`.
    #[arg(long)]
    episodes: Option<usize>,
    /// Evaluation seed, default the checkpoint's training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    qgbs_m: Option<usize>,
    #[arg(long)]
    qgbs_k: Option<usize>,
    #[arg(long)]
    qgbs_b: Option<usize>,
    #[arg(long)]
    qgbs_snr: Option<f64>,
    #[arg(long)]
    qgbs_eta: Option<f64>,
    /// min or q1
    #[arg(long)]
    qgbs_scoring: Option<String>,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn load_data(flag: Option<&Path>, cfg: &RunConfig) -> Result<Dataset> {
    let path = match (flag, &cfg.data) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => bail!("no dataset given: pass --data or set `data` in the config"),
    };
    Dataset::load(&path).with_context(|| format!("loading dataset {}", path.display()))
}

fn sampler_from(args: &EvalArgs, ckpt: &Checkpoint) -> Result<Sampler> {
    let mut sampler: Sampler = args.sampler.parse()?;
    match &mut sampler {
        Sampler::BestOfN(n) | Sampler::Euler(n) => {
            if let Some(v) = args.n {
                *n = v;
            }
            if *n == 0 {
                bail!("--n must be positive");
            }
        }
        Sampler::Qgbs(q) => {
            *q = ckpt.config.qgbs;
            q.m = args.qgbs_m.unwrap_or(q.m);
            q.k = args.qgbs_k.unwrap_or(q.k);
            q.b = args.qgbs_b.unwrap_or(q.b);
            q.snr = args.qgbs_snr.unwrap_or(q.snr);
            q.eta = args.qgbs_eta.unwrap_or(q.eta);
            if let Some(s) = &args.qgbs_scoring {
                q.scoring = match s.as_str() {
                    "min" => Scoring::Min,
                    "q1" => Scoring::Q1,
                    other => bail!("unknown scoring '{other}' (expected min or q1)"),
                };
            }
            q.validate()?;
        }
        Sampler::OneStep => {}
    }
    Ok(sampler)
}

fn report(r: &SuiteReport, ok: &mut bool) {
    println!("{r}");
    *ok &= r.success;
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData {
            env,
            episodes,
            seed,
            out,
        } => {
            let env = Env::by_name(&env)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = generate_offline_dataset(&env, &env.behavior(), episodes, &mut rng)?;
            data.save(&out)?;
            println!("{}", serde_json::to_string_pretty(&data.stats)?);
            eprintln!("wrote {} transitions to {}", data.len(), out.display());
        }
        Command::TrainOffline {
            config,
            data,
            seed,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let data = load_data(data.as_deref(), &cfg)?;
            let seed = seed.or(cfg.seeds.first().copied()).unwrap_or(0);
            let run = train_offline(&cfg, &data, seed, &mut |step, r| {
                eprintln!(
                    "offline step {step}: success {:.3}, return {:.2}",
                    r.success_rate, r.mean_return
                )
            })?;
            run.checkpoint.save(&out)?;
            eprintln!("wrote checkpoint to {}", out.display());
            if let Some(msg) = run.aborted {
                bail!("training aborted at {msg}; last good checkpoint saved");
            }
        }
        Command::AdaptOnline {
            config,
            ckpt,
            data,
            out,
            csv,
        } => {
            let cfg = load_config(config.as_deref())?;
            let offline = Checkpoint::load(&ckpt)
                .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
            let data = load_data(data.as_deref(), &cfg)?;
            let run = adapt_online(&cfg, &offline, &data, &mut |step, r| {
                eprintln!(
                    "online step {step}: success {:.3}, return {:.2}",
                    r.success_rate, r.mean_return
                )
            })?;
            run.checkpoint.save(&out)?;
            let csv = csv.unwrap_or_else(|| out.with_extension("csv"));
            fs::write(&csv, run.csv())?;
            eprintln!(
                "success {:.3} -> {:.3} over {} episodes; wrote {} and {}",
                run.offline_eval.success_rate,
                run.final_eval.success_rate,
                run.episodes,
                out.display(),
                csv.display()
            );
            if let Some(msg) = run.aborted {
                bail!("adaptation aborted at {msg}; last good checkpoint saved");
            }
        }
        Command::Eval(args) => {
            let ckpt = Checkpoint::load(&args.ckpt)
                .with_context(|| format!("loading checkpoint {}", args.ckpt.display()))?;
            let sampler = sampler_from(&args, &ckpt)?;
            let episodes = args.episodes.unwrap_or(ckpt.config.eval_episodes);
            if episodes == 0 {
                bail!("--episodes must be at least 1");
            }
            let mut rng = eval_rng(args.seed.unwrap_or(ckpt.seed));
            let r = evaluate(
                &ckpt.policy,
                &ckpt.critics,
                &ckpt.env()?,
                episodes,
                sampler,
                &mut rng,
            )?;
            let out = serde_json::json!({
                "sampler": sampler.to_string(),
                "episodes": r.episodes,
                "success_rate": r.success_rate,
                "mean_return": r.mean_return,
                "return_std": r.return_std,
                "nfe_per_action": r.nfe_per_action,
                "measured_nfe_per_action": r.measured_nfe_per_action,
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Verify { quick, ckpt } => {
            let mut ok = true;
            let (instances, samples, pairs) = if quick {
                (60, 2_000, 10)
            } else {
                (1000, 100_000, 50)
            };
            report(&kkt_suite(instances, samples, 0)?, &mut ok);
            let (suite, checks) = autodiff_suite(1)?;
            for (net, c) in &checks {
                println!(
                    "  {net:>16} {:<22} {}/{} worst gap {:.2e}",
                    c.name,
                    c.checked - c.failures,
                    c.checked,
                    c.worst_gap
                );
            }
            report(&suite, &mut ok);
            report(&equivalence_suite(pairs, 2)?, &mut ok);
            match ckpt {
                Some(path) => {
                    let ckpt = Checkpoint::load(&path)
                        .with_context(|| format!("loading checkpoint {}", path.display()))?;
                    let env = ckpt.env()?;
                    let data = generate_offline_dataset(
                        &env,
                        &env.behavior(),
                        200,
                        &mut ChaCha8Rng::seed_from_u64(3),
                    )?;
                    report(
                        &semigroup_check(&ckpt.policy, &data.states(), 1000, 0.05, 4)?,
                        &mut ok,
                    );
                    let probes: Vec<Vec<f32>> = env
                        .probe_states()
                        .iter()
                        .map(|s| s.iter().map(|&v| v as f32).collect())
                        .collect();
                    report(
                        &sampler_consistency_check(&ckpt.policy, &probes, 2000, 20, 0.1, 5)?.0,
                        &mut ok,
                    );
                }
                None => println!(
                    "SKIP semigroup / sampler consistency: pass --ckpt with a trained checkpoint"
                ),
            }
            return Ok(ok);
        }
        Command::Plot { csv, out } => {
            let text =
                fs::read_to_string(&csv).with_context(|| format!("reading {}", csv.display()))?;
            let rows = parse_diagnostics(&text)?;
            fs::write(&out, diagnostics_svg(&rows))?;
            eprintln!("wrote {} ({} rows)", out.display(), rows.len());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
