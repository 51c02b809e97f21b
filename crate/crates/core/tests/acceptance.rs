//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 9`.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use flowmapq::critic::{CriticArch, CriticEnsemble};
use flowmapq::diffcore::DenseArray;
use flowmapq::envs::{generate_offline_dataset, Dataset, Env, ModalBandit};
use flowmapq::flowmap::{gaussian, Distillation, FlowMapPolicy, PolicyArch};
use flowmapq::harness::{
    adapt_online, autodiff_suite, equivalence_suite, eval_rng, evaluate, kkt_suite,
    sampler_consistency_check, semigroup_check, train_offline, Checkpoint, OnlineRun, RunConfig,
    Sampler,
};
use flowmapq::qgbs::{beam_search, best_of_n, nfe, QgbsConfig, Scoring};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const GATE_OFFLINE_STEPS: u64 = 20_000;
const GATE_ONLINE_STEPS: u64 = 20_000;
const GATE_DATA_EPISODES: usize = 1000;
const BANDIT_OFFLINE_STEPS: u64 = 5_000;
const BANDIT_DATA_EPISODES: usize = 5000;
const QGBS_EVAL_EPISODES: usize = 100;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn gate_config() -> RunConfig {
    let mut cfg = RunConfig {
        env: "point_mass_gate".into(),
        offline_steps: GATE_OFFLINE_STEPS,
        online_steps: GATE_ONLINE_STEPS,
        variant: Distillation::Epd,
        ..Default::default()
    };
    cfg.curriculum.warmup = GATE_OFFLINE_STEPS / 10;
    cfg.curriculum.anneal = GATE_OFFLINE_STEPS / 2;
    cfg
}

fn gate_dataset(seed: u64) -> Dataset {
    let env = Env::by_name("point_mass_gate").unwrap();
    generate_offline_dataset(
        &env,
        &env.behavior(),
        GATE_DATA_EPISODES,
        &mut ChaCha8Rng::seed_from_u64(100 + seed),
    )
    .unwrap()
}

struct GateSeed {
    seed: u64,
    data: Dataset,
    offline: Checkpoint,
    online: OnlineRun,
    control: OnlineRun,
    elapsed: Duration,
}

fn run_gate_seed(seed: u64) -> GateSeed {
    let start = Instant::now();
    let cfg = gate_config();
    let data = gate_dataset(seed);
    let off = train_offline(&cfg, &data, seed, &mut |_, _| {}).unwrap();
    assert!(
        off.aborted.is_none(),
        "offline training aborted: {:?}",
        off.aborted
    );
    let online = adapt_online(&cfg, &off.checkpoint, &data, &mut |_, _| {}).unwrap();
    let mut ctl = cfg.clone();
    ctl.trust_region.eta = 0.0;
    let control = adapt_online(&ctl, &off.checkpoint, &data, &mut |_, _| {}).unwrap();
    let elapsed = start.elapsed();
    eprintln!(
        "  seed {seed}: behavior {:.2}, offline {:.2}, online {:.2}, control {:.2} ({:.0}s)",
        data.stats.success_rate,
        online.offline_eval.success_rate,
        online.final_eval.success_rate,
        control.final_eval.success_rate,
        elapsed.as_secs_f64()
    );
    GateSeed {
        seed,
        data,
        offline: off.checkpoint,
        online,
        control,
        elapsed,
    }
}

fn kkt() -> Verdict {
    let start = Instant::now();
    let r = kkt_suite(1000, 100_000, 0).unwrap();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        r.success && secs < 300.0,
        format!("{} in {secs:.0}s", r.detail),
    )
}

fn equivalence() -> Verdict {
    let r = equivalence_suite(50, 1).unwrap();
    verdict(r.success, r.detail)
}

fn autodiff() -> Verdict {
    let (r, checks) = autodiff_suite(2).unwrap();
    let failing: Vec<String> = checks
        .iter()
        .filter(|(_, c)| !c.passed())
        .map(|(net, c)| format!("{net}/{}", c.name))
        .collect();
    let detail = if failing.is_empty() {
        r.detail
    } else {
        format!("{}; failing: {}", r.detail, failing.join(", "))
    };
    verdict(r.success, detail)
}

fn qgbs_accounting() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let arch = PolicyArch {
        hidden: vec![32, 32],
        ..Default::default()
    };
    let policy = FlowMapPolicy::<f32>::new(4, 2, &arch, &mut rng).unwrap();
    let critics =
        CriticEnsemble::<f32>::new(4, 2, &CriticArch::default(), 0.99, 0.005, &mut rng).unwrap();
    let state = [-0.5f32, 0.1, 1.0, 0.0];
    // (branches, rounds, beam) -> expected evaluations
    let table = [
        ((1, 0, 32), 32),
        ((4, 1, 4), 20),
        ((2, 1, 8), 24),
        ((4, 2, 4), 36),
        ((4, 2, 16), 144),
    ];
    let mut mismatches = Vec::new();
    for ((b, k, m), want) in table {
        let cfg = QgbsConfig {
            m,
            k,
            b,
            ..Default::default()
        };
        let (_, beam) = beam_search(
            &policy,
            &critics,
            &state,
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        if beam.nfe != want || nfe(m, k, b) != want || cfg.nfe() != want {
            mismatches.push(format!(
                "(m={m}, k={k}, b={b}): counted {} want {want}",
                beam.nfe
            ));
        }
    }
    let mut identical = 0;
    for trial in 0..20u64 {
        let cfg = QgbsConfig {
            m: 32,
            k: 0,
            ..Default::default()
        };
        let s = [-1.0 + 0.1 * trial as f32, 0.05, 1.0, 0.0];
        let a = beam_search(
            &policy,
            &critics,
            &s,
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(trial),
        )
        .unwrap();
        let b = best_of_n(
            &policy,
            &critics,
            &s,
            32,
            Scoring::Min,
            &mut ChaCha8Rng::seed_from_u64(trial),
        )
        .unwrap();
        let same_bits =
            a.0.iter()
                .zip(&b.0)
                .all(|(x, y)| x.to_bits() == y.to_bits())
                && a.1
                    .q_values
                    .iter()
                    .zip(&b.1.q_values)
                    .all(|(x, y)| x.to_bits() == y.to_bits());
        if same_bits {
            identical += 1;
        }
    }
    verdict(
        mismatches.is_empty() && identical == 20,
        format!(
            "{} of 5 budgets counted exactly{}; K=0 bit-identical to best-of-M in {identical}/20 states",
            5 - mismatches.len(),
            if mismatches.is_empty() { String::new() } else { format!(" ({})", mismatches.join("; ")) }
        ),
    )
}

fn multimodality() -> Verdict {
    let env = Env::by_name("modal_bandit").unwrap();
    let bandit = ModalBandit::default();
    let mut cfg = RunConfig {
        env: "modal_bandit".into(),
        offline_steps: BANDIT_OFFLINE_STEPS,
        eval_interval: BANDIT_OFFLINE_STEPS,
        ..Default::default()
    };
    cfg.curriculum.warmup = BANDIT_OFFLINE_STEPS / 10;
    cfg.curriculum.anneal = BANDIT_OFFLINE_STEPS / 2;
    let mut passing = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let data = generate_offline_dataset(
            &env,
            &env.behavior(),
            BANDIT_DATA_EPISODES,
            &mut ChaCha8Rng::seed_from_u64(200 + seed),
        )
        .unwrap();
        let run = train_offline(&cfg, &data, seed, &mut |_, _| {}).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let n = 10_000;
        let s = DenseArray::<f32>::zeros(vec![n, 1]);
        let a = run
            .checkpoint
            .policy
            .sample_one_step(&s, &gaussian(&mut rng, n, 2))
            .unwrap();
        let mut mass = [0usize; 4];
        for i in 0..n {
            let row: Vec<f64> = a.row(i).iter().map(|&v| v as f64).collect();
            mass[bandit.nearest_mode(&row)] += 1;
        }
        let covered = mass.iter().filter(|&&c| c as f64 >= 0.1 * n as f64).count();
        if covered >= 3 {
            passing += 1;
        }
        lines.push(format!("{covered}"));
        eprintln!(
            "  seed {seed}: mode mass {:?}",
            mass.map(|c| c as f64 / n as f64)
        );
    }
    verdict(
        passing >= 4,
        format!(
            "{passing}/5 seeds cover >= 3 modes at >= 10% mass (modes covered: {})",
            lines.join(", ")
        ),
    )
}

fn semigroup(runs: &[GateSeed]) -> Verdict {
    let mut worst = 0.0f64;
    let mut pass = true;
    for r in runs {
        let held_out = gate_dataset(1_000 + r.seed);
        let rep = semigroup_check(
            &r.offline.policy,
            &held_out.states(),
            1000,
            0.05,
            10 + r.seed,
        )
        .unwrap();
        pass &= rep.success;
        worst = worst.max(rep.statistic);
    }
    verdict(
        pass,
        format!(
            "largest median gap {worst:.4} over {} seeds (threshold 0.05)",
            runs.len()
        ),
    )
}

fn sampler_consistency(runs: &[GateSeed]) -> Verdict {
    let env = Env::by_name("point_mass_gate").unwrap();
    let probes: Vec<Vec<f32>> = env
        .probe_states()
        .iter()
        .map(|s| s.iter().map(|&v| v as f32).collect())
        .collect();
    let mut worst = 0.0f64;
    let mut pass = true;
    for r in runs {
        let (rep, d) =
            sampler_consistency_check(&r.offline.policy, &probes, 2000, 20, 0.1, 20 + r.seed)
                .unwrap();
        pass &= rep.success;
        worst = d.iter().copied().fold(worst, f64::max);
    }
    verdict(
        pass,
        format!(
            "largest energy distance {worst:.4} over {} states x {} seeds (threshold 0.1)",
            probes.len(),
            runs.len()
        ),
    )
}

fn improvement(runs: &[GateSeed]) -> Verdict {
    let lifted = runs.iter().filter(|r| r.online.lift() >= 0.2).count();
    let control_ok = runs.iter().all(|r| r.control.lift().abs() < 0.05);
    let data_ok = runs
        .iter()
        .all(|r| (0.5..=0.7).contains(&r.data.stats.success_rate));
    let slowest = runs
        .iter()
        .map(|r| r.elapsed.as_secs_f64())
        .fold(0.0, f64::max);
    let lifts: Vec<String> = runs
        .iter()
        .map(|r| format!("{:+.2}", r.online.lift()))
        .collect();
    let controls: Vec<String> = runs
        .iter()
        .map(|r| format!("{:+.2}", r.control.lift()))
        .collect();
    verdict(
        lifted >= 4 && control_ok && data_ok && slowest < 900.0,
        format!(
            "lift >= 0.2 in {lifted}/5 seeds [{}]; eta=0 lift [{}]; behavior success in [0.5, 0.7]: {data_ok}; \
             slowest seed {slowest:.0}s",
            lifts.join(", "),
            controls.join(", ")
        ),
    )
}

fn trust_region_diagnostic(runs: &[GateSeed]) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for r in runs {
        let (first, last) = (
            r.online.rows.first().unwrap(),
            r.online.rows.last().unwrap(),
        );
        let rel = (last.displacement_mean - last.eta_eff_mean).abs() / last.eta_eff_mean;
        pass &= first.displacement_mean < 0.01 && rel <= 0.2;
        parts.push(format!(
            "{:.4}->{:.3}/{:.3}",
            first.displacement_mean, last.displacement_mean, last.eta_eff_mean
        ));
    }
    verdict(
        pass,
        format!(
            "onset -> final displacement / eta_eff per seed: {}",
            parts.join(", ")
        ),
    )
}

fn qgbs_direction(runs: &[GateSeed]) -> Verdict {
    let env = Env::by_name("point_mass_gate").unwrap();
    let (mut q_total, mut b_total) = (0.0, 0.0);
    for r in runs {
        let ckpt = &r.online.checkpoint;
        let qcfg = QgbsConfig {
            m: 4,
            k: 1,
            b: 4,
            ..ckpt.config.qgbs
        };
        let q = evaluate(
            &ckpt.policy,
            &ckpt.critics,
            &env,
            QGBS_EVAL_EPISODES,
            Sampler::Qgbs(qcfg),
            &mut eval_rng(r.seed),
        )
        .unwrap();
        let b = evaluate(
            &ckpt.policy,
            &ckpt.critics,
            &env,
            QGBS_EVAL_EPISODES,
            Sampler::BestOfN(20),
            &mut eval_rng(r.seed),
        )
        .unwrap();
        eprintln!(
            "  seed {}: qgbs {:.2}, best-of-20 {:.2}",
            r.seed, q.success_rate, b.success_rate
        );
        q_total += q.success_rate;
        b_total += b.success_rate;
    }
    let n = runs.len() as f64;
    let (q, b) = (q_total / n, b_total / n);
    verdict(
        q >= b - 0.02,
        format!(
            "mean success qgbs(4,1,4) {q:.3} vs best-of-20 {b:.3} over {} seeds",
            runs.len()
        ),
    )
}

fn determinism(first: &GateSeed) -> Verdict {
    let again = run_gate_seed(first.seed);
    let (a, b) = (first.online.csv(), again.online.csv());
    verdict(
        a == b,
        format!(
            "seed {}: {} bytes, identical: {}",
            first.seed,
            a.len(),
            a == b
        ),
    )
}

fn main() {
    let wanted: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let want = |i: usize| wanted.is_empty() || wanted.contains(&i);
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut record = |i: usize, name: &'static str, v: Verdict| {
        println!(
            "[{i:>2}] {} {name}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        results.push((i, name, v));
    };

    if want(1) {
        record(1, "trust-region KKT suite", kkt());
    }
    if want(2) {
        record(2, "average-velocity gradient equivalence", equivalence());
    }
    if want(3) {
        record(3, "autodiff and JVP oracles", autodiff());
    }
    if want(9) {
        record(
            9,
            "beam-search accounting and degeneracy",
            qgbs_accounting(),
        );
    }
    if want(6) {
        record(6, "multimodal coverage", multimodality());
    }
    if [4, 5, 7, 8, 10, 11].iter().any(|&i| want(i)) {
        eprintln!("training point_mass_gate over {} seeds", SEEDS.len());
        let runs: Vec<GateSeed> = SEEDS.iter().map(|&s| run_gate_seed(s)).collect();
        if want(4) {
            record(4, "semigroup consistency", semigroup(&runs));
        }
        if want(5) {
            record(5, "one-step vs 20-step Euler", sampler_consistency(&runs));
        }
        if want(7) {
            record(7, "offline-to-online improvement", improvement(&runs));
        }
        if want(8) {
            record(
                8,
                "trust-region displacement",
                trust_region_diagnostic(&runs),
            );
        }
        if want(10) {
            record(10, "beam search vs best-of-20", qgbs_direction(&runs));
        }
        if want(11) {
            record(11, "determinism", determinism(&runs[0]));
        }
    }

    let failed: Vec<usize> = results
        .iter()
        .filter(|(_, _, v)| !v.pass)
        .map(|(i, _, _)| *i)
        .collect();
    println!(
        "acceptance: {}/{} passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
