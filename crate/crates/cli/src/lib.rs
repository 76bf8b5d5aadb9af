//! The `camac` command line: simulate, train, evaluate, compare, report.
//!
//! Exit codes: 0 on success, 1 for usage or configuration problems (nothing
//! is written), 2 when a run fails after it started.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use camac_core::agent::Model;
use camac_core::baselines::{greedy_policy, random_policy, run_algorithm, Algorithm, AlgorithmRun};
use camac_core::environment::StakeholderWeights;
use camac_core::metrics::{emit_report, read_reports, RunReport, REPORT_JSON};
use camac_core::training::{
    consensus_action, rollout, train_with, write_trace, ChargingEnv, EpisodeRecord, Environment, Learner, EVAL_STREAM,
    TRAIN_STREAM,
};
use camac_core::{mix_seed, Error};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub mod config;

use config::{validate_config, ConfigError, Profile, RunConfig};

pub const MANIFEST_JSON: &str = "manifest.json";
pub const CONFIG_JSON: &str = "config.json";
pub const TRACE_CSV: &str = "trace.csv";
pub const CHECKPOINT_JSON: &str = "checkpoint.json";
pub const EVALUATION_CSV: &str = "evaluation.csv";
pub const STEPS_CSV: &str = "steps.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
/// Caps the worker threads `compare` uses.
pub const THREADS_ENV: &str = "CAMAC_THREADS";

#[derive(Debug, Parser)]
#[command(name = "camac", version, about = "Context-aware multi-agent EV charging coordination")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; the profile defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Profile::Desk)]
    pub profile: Profile,
    /// Seeds the scenario and every learner.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Directory receiving every output of the run.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll a fixed policy (greedy or random) through the simulator.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "greedy")]
        algorithms: Algorithm,
    },
    /// Train CAMA (or the context-blind DQN) and write its trace and checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "cama")]
        algorithms: Algorithm,
    },
    /// Score a checkpoint on held-out episodes against the greedy reference.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and score several algorithms over several seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "cama,dqn,ucb,greedy,random")]
        algorithms: Vec<Algorithm>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Summarise the report.json a previous `compare` wrote into --out.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

/// Why a command stopped.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Config(ConfigError),
    Runtime(Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) | Failure::Config(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    fn lines(&self) -> Vec<String> {
        match self {
            Failure::Usage(m) => vec![m.clone()],
            Failure::Config(e) => e.lines(),
            Failure::Runtime(e) => vec![e.to_string()],
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

/// Parses `argv`, runs the command, and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            for line in f.lines() {
                eprintln!("error: {line}");
            }
            f.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Outcome<()> {
    match command {
        Command::Simulate { common, algorithms } => simulate(&common, algorithms),
        Command::Train { common, algorithms } => train(&common, algorithms),
        Command::Evaluate { common, checkpoint } => evaluate(&common, &checkpoint),
        Command::Compare { common, algorithms, seeds } => compare(&common, &algorithms, seeds),
        Command::Report { out } => report(&out),
    }
}

/// Resolves the config and applies the command-line overrides.
fn load(common: &Common) -> Outcome<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => validate_config(path, common.profile).map_err(Failure::Config)?,
        None => RunConfig::for_profile(common.profile),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(n) = common.episodes {
        cfg.trainer.episodes = n;
    }
    let violations = cfg.violations();
    if !violations.is_empty() {
        return Err(Failure::Config(ConfigError::Invalid(violations)));
    }
    Ok(cfg)
}

fn prepare_out(out: &Path) -> Outcome<()> {
    if out.exists() && !out.is_dir() {
        return Err(Failure::Usage(format!("--out {} exists and is not a directory", out.display())));
    }
    fs::create_dir_all(out)?;
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_sha256: String,
    config_file: &'a str,
    seed: u64,
    episodes: usize,
    algorithms: Vec<Algorithm>,
    seeds: Vec<u64>,
    camac_version: &'a str,
    core_version: &'a str,
    outputs: Vec<&'a str>,
    /// Command line that reproduces this directory from `config_file`.
    rerun: String,
}

fn write_manifest(out: &Path, command: &str, cfg: &RunConfig, algorithms: &[Algorithm], seeds: &[u64], outputs: &[&str], extra: &str) -> Outcome<()> {
    fs::write(out.join(CONFIG_JSON), cfg.canonical_json() + "\n")?;
    let algos: Vec<String> = algorithms.iter().map(|a| a.to_string()).collect();
    let seed_flag = match command {
        "compare" => format!("--seed {} --seeds {}", seeds.first().copied().unwrap_or(cfg.trainer.seed), seeds.len()),
        _ => format!("--seed {}", cfg.trainer.seed),
    };
    let algo_flag = if command == "evaluate" { String::new() } else { format!(" --algorithms {}", algos.join(",")) };
    let manifest = Manifest {
        command,
        config_sha256: cfg.sha256(),
        config_file: CONFIG_JSON,
        seed: cfg.trainer.seed,
        episodes: cfg.trainer.episodes,
        algorithms: algorithms.to_vec(),
        seeds: seeds.to_vec(),
        camac_version: env!("CARGO_PKG_VERSION"),
        core_version: camac_core::VERSION,
        outputs: outputs.to_vec(),
        rerun: format!("camac {command} --config {CONFIG_JSON} {seed_flag}{algo_flag}{extra} --out <dir>"),
    };
    let mut f = BufWriter::new(File::create(out.join(MANIFEST_JSON))?);
    serde_json::to_writer_pretty(&mut f, &manifest).map_err(Error::from)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

fn log_episode(tag: &str, total: usize, r: &EpisodeRecord) {
    let reward = r.reward_under(&StakeholderWeights::initial());
    let loss = r.loss_mean.map_or_else(|| "-".to_string(), |l| format!("{l:.4}"));
    eprintln!(
        "[{tag}] episode {}/{total} reward {reward:.3} coord {:.2} eps {:.3} loss {loss}",
        r.episode + 1,
        r.coordination_rate(),
        r.epsilon_mean
    );
}

fn write_records(path: &Path, records: &[EpisodeRecord]) -> Outcome<()> {
    write_trace(records, BufWriter::new(File::create(path)?))?;
    Ok(())
}

fn simulate(common: &Common, algorithm: Algorithm) -> Outcome<()> {
    if !matches!(algorithm, Algorithm::Greedy | Algorithm::Random) {
        return Err(Failure::Usage(format!("simulate runs greedy or random, not {algorithm}")));
    }
    let cfg = load(common)?;
    prepare_out(&common.out)?;
    let mut env = ChargingEnv::new(&cfg.scenario, false, TRAIN_STREAM)?;
    let dim = env.reset(0)?.state.dim();
    let adaptation = camac_core::training::adaptation_params(dim, &cfg.trainer);
    let n = env.n_templates();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.trainer.seed, 6));
    let mut policy = |obs: &camac_core::agent::Observation| match algorithm {
        Algorithm::Greedy => Ok(greedy_policy(&obs.state)),
        _ => random_policy(&mut rng, n),
    };
    let runs = rollout(&mut env, 0..cfg.trainer.episodes, cfg.trainer.t_max, &adaptation, &mut policy)?;
    let records: Vec<EpisodeRecord> = runs.iter().map(|(r, _)| r.clone()).collect();
    for r in &records {
        log_episode(algorithm.name(), cfg.trainer.episodes, r);
    }
    write_records(&common.out.join(TRACE_CSV), &records)?;

    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(common.out.join(STEPS_CSV))?));
    w.write_record([
        "episode",
        "t",
        "metered_kwh",
        "delivered_kwh",
        "consumed_kwh",
        "curtailed_kwh",
        "total_load_kw",
        "ev_energy_cost",
        "waiting_evs",
        "deadline_misses",
        "min_soc",
        "feasible",
    ])
    .map_err(Error::from)?;
    for (r, outcomes) in &runs {
        for o in outcomes {
            w.write_record([
                r.episode.to_string(),
                o.t.to_string(),
                o.metered_kwh.to_string(),
                o.delivered_kwh.to_string(),
                o.consumed_kwh.to_string(),
                o.curtailed_kwh.to_string(),
                o.total_load_kw.to_string(),
                o.ev_energy_cost.to_string(),
                o.waiting_evs.to_string(),
                o.deadline_misses.to_string(),
                o.min_soc.to_string(),
                u8::from(o.is_feasible()).to_string(),
            ])
            .map_err(Error::from)?;
        }
    }
    w.flush()?;
    write_manifest(&common.out, "simulate", &cfg, &[algorithm], &[cfg.trainer.seed], &[TRACE_CSV, STEPS_CSV], "")
}

fn train(common: &Common, algorithm: Algorithm) -> Outcome<()> {
    let learner = match algorithm {
        Algorithm::Cama => Learner::Cama,
        Algorithm::Dqn => Learner::Dqn,
        other => return Err(Failure::Usage(format!("train runs cama or dqn, not {other}"))),
    };
    let cfg = load(common)?;
    prepare_out(&common.out)?;
    let total = cfg.trainer.episodes;
    let out = train_with(&cfg.scenario, &cfg.trainer, learner, &mut |r, _| {
        log_episode(algorithm.name(), total, r);
        Ok(())
    })?;
    write_records(&common.out.join(TRACE_CSV), &out.records)?;
    out.model.save(&common.out.join(CHECKPOINT_JSON))?;
    write_manifest(&common.out, "train", &cfg, &[algorithm], &[cfg.trainer.seed], &[TRACE_CSV, CHECKPOINT_JSON], "")
}

fn evaluate(common: &Common, checkpoint: &Path) -> Outcome<()> {
    let mut cfg = load(common)?;
    if let Some(n) = common.episodes {
        cfg.evaluation.episodes = n;
    }
    // An unreadable or invalid checkpoint is an input problem: nothing has run yet.
    let model = Model::load(checkpoint).map_err(|e| Failure::Usage(format!("--checkpoint {}: {e}", checkpoint.display())))?;
    let algorithm = if model.network.config.gnn.is_some() { Algorithm::Cama } else { Algorithm::Dqn };
    prepare_out(&common.out)?;

    let mut env = ChargingEnv::new(&cfg.scenario, algorithm == Algorithm::Cama, EVAL_STREAM)?;
    let held_out = 0..cfg.evaluation.episodes;
    let t_max = cfg.trainer.t_max;
    let runs = rollout(&mut env, held_out.clone(), t_max, &model.adaptation, &mut |obs| consensus_action(&model, obs))?;
    let (evaluation, outcomes): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    for r in &evaluation {
        log_episode("evaluate", cfg.evaluation.episodes, r);
    }
    let mut greedy_env = ChargingEnv::new(&cfg.scenario, false, EVAL_STREAM)?;
    let reference = rollout(&mut greedy_env, held_out, t_max, &model.adaptation, &mut |obs| Ok(greedy_policy(&obs.state)))?;
    let (ref_records, ref_outcomes): (Vec<_>, Vec<_>) = reference.into_iter().unzip();

    let run = AlgorithmRun { algorithm, seed: cfg.trainer.seed, curve: Vec::new(), evaluation: evaluation.clone(), outcomes, model: None };
    let greedy = AlgorithmRun {
        algorithm: Algorithm::Greedy,
        seed: cfg.trainer.seed,
        curve: Vec::new(),
        evaluation: ref_records,
        outcomes: ref_outcomes,
        model: None,
    };
    let report = RunReport::from_run(&run, &greedy)?;
    write_records(&common.out.join(EVALUATION_CSV), &evaluation)?;
    let mut f = BufWriter::new(File::create(common.out.join(REPORT_JSON))?);
    serde_json::to_writer_pretty(&mut f, &[report]).map_err(Error::from)?;
    f.write_all(b"\n")?;
    f.flush()?;
    let extra = format!(" --checkpoint {}", checkpoint.display());
    write_manifest(&common.out, "evaluate", &cfg, &[algorithm], &[cfg.trainer.seed], &[EVALUATION_CSV, REPORT_JSON], &extra)
}

/// Worker count for `jobs` jobs: `CAMAC_THREADS` if set, else the available cores.
pub fn worker_count(jobs: usize) -> Outcome<usize> {
    let cap = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Failure::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    Ok(cap.min(jobs).max(1))
}

fn compare(common: &Common, algorithms: &[Algorithm], n_seeds: usize) -> Outcome<()> {
    if algorithms.is_empty() || n_seeds == 0 {
        return Err(Failure::Usage("compare needs at least one algorithm and one seed".into()));
    }
    let mut requested: Vec<Algorithm> = Vec::new();
    for a in algorithms {
        if !requested.contains(a) {
            requested.push(*a);
        }
    }
    let cfg = load(common)?;
    let base = cfg.trainer.seed;
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|k| base.wrapping_add(k)).collect();
    // Greedy is the reference for every gain metric, so it always runs.
    let mut run_list = requested.clone();
    if !run_list.contains(&Algorithm::Greedy) {
        run_list.push(Algorithm::Greedy);
    }
    let jobs: Vec<(u64, Algorithm)> = seeds.iter().flat_map(|s| run_list.iter().map(move |a| (*s, *a))).collect();
    let workers = worker_count(jobs.len())?;
    prepare_out(&common.out)?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<camac_core::Result<AlgorithmRun>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(seed, algorithm)) = jobs.get(i) else { break };
                let seeded = cfg.clone().with_seed(seed);
                let tag = format!("{algorithm} seed {seed}");
                let total = seeded.trainer.episodes;
                let res = run_algorithm(&seeded.scenario, &seeded.trainer, &seeded.evaluation, algorithm, &mut |r| {
                    log_episode(&tag, total, r)
                });
                results.lock().expect("no worker panics while holding the lock")[i] = Some(res);
            });
        }
    });
    let mut runs: Vec<AlgorithmRun> = Vec::with_capacity(jobs.len());
    for r in results.into_inner().expect("workers joined") {
        runs.push(r.expect("every job ran")?);
    }

    let mut reports = Vec::with_capacity(seeds.len() * requested.len());
    for (k, _) in seeds.iter().enumerate() {
        let block = &runs[k * run_list.len()..(k + 1) * run_list.len()];
        let reference = block.iter().find(|r| r.algorithm == Algorithm::Greedy).expect("greedy always runs");
        for a in &requested {
            let run = block.iter().find(|r| r.algorithm == *a).expect("every requested algorithm ran");
            let report = RunReport::from_run(run, reference)?;
            report.check()?;
            reports.push(report);
        }
    }
    emit_report(&reports, &common.out)?;
    write_summary(&common.out.join(SUMMARY_CSV), &reports)?;
    write_manifest(
        &common.out,
        "compare",
        &cfg,
        &requested,
        &seeds,
        &[REPORT_JSON, camac_core::metrics::CURVES_CSV, SUMMARY_CSV],
        "",
    )
}

/// Published figures for methods this toolkit does not implement; shown for
/// context only and never produced by a run.
pub const PUBLISHED_ONLY: [(&str, [f64; 6]); 3] = [
    ("ddpg", [71.0, 6.0, 4.0, 65.0, 58.0, 45.0]),
    ("a3c", [75.0, 7.0, 6.0, 70.0, 62.0, 40.0]),
    ("ppo", [69.0, 5.0, 3.0, 68.0, 55.0, 50.0]),
];

pub const SUMMARY_HEADER: [&str; 12] = [
    "algorithm",
    "runs",
    "coordination_pct",
    "energy_gain_pct",
    "cost_reduction_pct",
    "stability_pct",
    "sample_efficiency_pct",
    "convergence_episodes",
    "peak_reduction_pct",
    "renewable_utilization_pct",
    "final_reward",
    "source",
];

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// One row per algorithm, averaged over seeds; rows for published-only methods follow.
pub fn summary_rows(reports: &[RunReport]) -> Vec<Vec<String>> {
    let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.2}"));
    let mut order: Vec<Algorithm> = Vec::new();
    for r in reports {
        if !order.contains(&r.algorithm) {
            order.push(r.algorithm);
        }
    }
    let mut rows = Vec::new();
    for a in order {
        let rs: Vec<&RunReport> = reports.iter().filter(|r| r.algorithm == a).collect();
        let pct = |f: &dyn Fn(&RunReport) -> Option<f64>| mean(rs.iter().filter_map(|r| f(r)).map(|v| 100.0 * v));
        rows.push(vec![
            a.to_string(),
            rs.len().to_string(),
            fmt(pct(&|r| Some(r.coordination_success_rate))),
            fmt(pct(&|r| Some(r.energy_efficiency_gain))),
            fmt(pct(&|r| Some(r.cost_reduction))),
            fmt(pct(&|r| r.training_stability)),
            fmt(pct(&|r| r.sample_efficiency)),
            fmt(mean(rs.iter().filter_map(|r| r.convergence_episode).map(|c| c as f64))),
            fmt(pct(&|r| Some(r.peak_demand_reduction))),
            fmt(pct(&|r| Some(r.renewable_utilization))),
            fmt(mean(rs.iter().map(|r| r.final_reward))),
            "measured".to_string(),
        ]);
    }
    for (name, v) in PUBLISHED_ONLY {
        let mut row = vec![name.to_string(), "0".to_string()];
        row.extend(v[..5].iter().map(|x| format!("{x:.2}")));
        row.push(format!("{:.2}", v[5]));
        row.extend([String::new(), String::new(), String::new()]);
        row.push("published, not reproduced".to_string());
        rows.push(row);
    }
    rows
}

fn write_summary(path: &Path, reports: &[RunReport]) -> Outcome<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(SUMMARY_HEADER).map_err(Error::from)?;
    for row in summary_rows(reports) {
        w.write_record(&row).map_err(Error::from)?;
    }
    w.flush()?;
    Ok(())
}

fn report(out: &Path) -> Outcome<()> {
    let path = out.join(REPORT_JSON);
    if !path.is_file() {
        return Err(Failure::Usage(format!("{} not found; run `camac compare --out {}` first", path.display(), out.display())));
    }
    let reports = read_reports(&path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    for r in &reports {
        r.check()?;
    }
    write_summary(&out.join(SUMMARY_CSV), &reports)?;
    let rows = summary_rows(&reports);
    let widths: Vec<usize> = (0..SUMMARY_HEADER.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([SUMMARY_HEADER[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<&str>| cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect::<Vec<_>>().join("  ");
    println!("{}", line(SUMMARY_HEADER.to_vec()));
    for r in &rows {
        println!("{}", line(r.iter().map(String::as_str).collect()));
    }
    Ok(())
}
