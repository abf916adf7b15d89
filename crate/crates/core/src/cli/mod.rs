//! The `gym` command line.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::{json, Value};
use thiserror::Error;

use crate::dataprep::{build_dpo_pairs, build_rs_pairs, build_sft, write_jsonl, DEFAULT_MAX_PAIRS_PER_TASK};
use crate::http::RetryConfig;
use crate::metrics::{best_at_k_rate, merge_summaries, pass_at_k, render_report, render_text, OutcomeMatrix, Summary};
use crate::model::{serialize_trajectory, CharRatioEstimator, Trajectory};
use crate::policy::PolicyConfig;
use crate::rollout::{read_log, sample_trajectories, Backend, SampleConfig, SampleSchedule};
use crate::session::EpisodeOptions;
use crate::suites::{load_suite, Suite};
use crate::verifier::{build_verifier_dataset, score_trajectory, VerifierBackend};

pub use config::{RunConfig, ScheduleConfig, MAX_TURNS_LIMIT};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "gym", version, about = "Sandboxed agent environment: evaluate, sample, select and mine datasets")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Greedy single-rollout evaluation with a report.
    Eval(RunArgs),
    /// Sample K rollouts per task (resumable).
    Sample(SampleArgs),
    /// Build SFT, DPO or rejection-sampling datasets from a log.
    Prepare(PrepareArgs),
    /// Score a log with a verifier and report Pass@K / Best@K curves.
    Select(SelectArgs),
    /// Merge summaries or logs into one leaderboard.
    Report(ReportArgs),
    /// Suite registry commands.
    Suite {
        #[command(subcommand)]
        command: SuiteCommand,
    },
    /// Check a config and its suites without running anything.
    Validate(RunArgs),
}

#[derive(Debug, Subcommand)]
enum SuiteCommand {
    /// List suites with mode and task count.
    Ls(RunArgs),
}

#[derive(Debug, Clone, Args)]
struct RunArgs {
    /// TOML run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Suite manifest (repeatable).
    #[arg(long = "suite")]
    suites: Vec<PathBuf>,
    /// Include the bundled mini-suites.
    #[arg(long)]
    bundled: bool,
    /// gold, looping, crashing, silent or debug.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    max_turns: Option<u32>,
    #[arg(long)]
    max_wall_s: Option<f64>,
    #[arg(long)]
    max_exec_s: Option<f64>,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sandbox_root: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackendArg {
    WorkStealing,
    FixedWorkers,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Rollouts per task.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    k: Option<u32>,
    /// Comma-separated per-rollout temperatures (length k).
    #[arg(long, value_delimiter = ',')]
    temperatures: Option<Vec<f64>>,
    /// Log path; defaults to <out_dir>/samples.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PrepareMode {
    Sft,
    Dpo,
    Rs,
}

#[derive(Debug, Args)]
struct PrepareArgs {
    #[arg(long)]
    log: PathBuf,
    #[arg(long, value_enum)]
    mode: PrepareMode,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MAX_PAIRS_PER_TASK)]
    max_pairs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VerifierKind {
    Oracle,
    Scripted,
    Remote,
}

#[derive(Debug, Args)]
struct SelectArgs {
    #[arg(long)]
    log: PathBuf,
    #[arg(long, value_enum, default_value = "oracle")]
    verifier: VerifierKind,
    /// JSON table for the scripted verifier: {"task#i": [l_yes, l_no]}.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Endpoint for the remote verifier.
    #[arg(long)]
    url: Option<String>,
    /// Largest K for the curves; defaults to the rollouts available.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    k: Option<u32>,
    /// Scored log; defaults to <log stem>.scored.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Selection report (JSON); printed to stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also write a balanced verifier training set here.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 32_768)]
    max_tokens: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    pool_size: usize,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// summary.json files or trajectory logs (.jsonl).
    #[arg(required = true)]
    paths: Vec<PathBuf>,
    /// Merged summary path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve_config(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.suites.extend(args.suites.iter().cloned());
    cfg.bundled |= args.bundled;
    if let Some(name) = &args.policy {
        cfg.policy = PolicyConfig::from_name(name)
            .ok_or_else(|| CliError::Config(format!("unknown policy {name:?}; use gold, looping, crashing, silent or debug")))?;
    }
    if args.max_turns.is_some() {
        cfg.budget.max_turns = args.max_turns;
    }
    if args.max_wall_s.is_some() {
        cfg.budget.max_wall_s = args.max_wall_s;
    }
    if args.max_exec_s.is_some() {
        cfg.budget.max_exec_s = args.max_exec_s;
    }
    if let Some(n) = args.pool_size {
        cfg.pool_size = n;
    }
    if let Some(b) = args.backend {
        cfg.backend = match b {
            BackendArg::WorkStealing => Backend::WorkStealing,
            BackendArg::FixedWorkers => Backend::FixedWorkers,
        };
    }
    if let Some(d) = &args.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(r) = &args.sandbox_root {
        cfg.sandbox_root = Some(r.clone());
    }
    Ok(cfg)
}

fn load_suites(cfg: &RunConfig) -> Result<Vec<Suite>, CliError> {
    cfg.validate()?;
    let mut suites: Vec<Suite> = Vec::new();
    for path in cfg.manifests() {
        let suite = load_suite(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if suites.iter().any(|s| s.id() == suite.id()) {
            return Err(CliError::Config(format!("suite {} is listed twice", suite.id())));
        }
        suites.push(suite);
    }
    Ok(suites)
}

fn sample_config(cfg: &RunConfig, schedule: SampleSchedule, out: PathBuf) -> SampleConfig {
    let mut sc = SampleConfig::new(schedule, out);
    sc.pool_size = cfg.pool_size;
    sc.base_seed = cfg.seed;
    sc.backend = cfg.backend;
    sc.overrides = cfg.budget.clone();
    sc.episode = EpisodeOptions::default();
    if let Some(root) = &cfg.sandbox_root {
        sc.episode.sandbox_root = root.clone();
    }
    sc
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn to_json(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn cmd_eval(args: &RunArgs) -> Result<(), CliError> {
    let cfg = resolve_config(args)?;
    let suites = load_suites(&cfg)?;
    let policy = cfg.policy.build(cfg.pool_size).map_err(|e| CliError::Config(e.to_string()))?;
    create_dir(&cfg.out_dir)?;
    let log_path = cfg.out_dir.join("trajectories.jsonl");
    let schedule = SampleSchedule::new(vec![0.0]).map_err(runtime)?;
    let summary = sample_trajectories(&suites, policy.as_ref(), &sample_config(&cfg, schedule, log_path.clone()))
        .map_err(runtime)?;
    log::info!("{} written, {} already present", summary.written, summary.skipped);
    let log = read_log(&log_path).map_err(runtime)?;
    let report = render_report(&log).map_err(runtime)?;
    write_file(&cfg.out_dir.join("report.md"), &report.text)?;
    write_file(&cfg.out_dir.join("summary.json"), &to_json(&report.summary))?;
    print!("{}", report.text);
    Ok(())
}

fn cmd_sample(args: &SampleArgs) -> Result<(), CliError> {
    let mut cfg = resolve_config(&args.run)?;
    if let Some(k) = args.k {
        cfg.schedule.k = k;
    }
    if let Some(t) = &args.temperatures {
        cfg.schedule.temperatures = Some(t.clone());
        if args.k.is_none() {
            cfg.schedule.k = t.len() as u32;
        }
    }
    let suites = load_suites(&cfg)?;
    let schedule = match &cfg.schedule.temperatures {
        Some(t) => SampleSchedule { k: cfg.schedule.k, temperatures: t.clone() },
        None => SampleSchedule::default_for(cfg.schedule.k).map_err(|e| CliError::Config(e.to_string()))?,
    };
    schedule.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let policy = cfg.policy.build(cfg.pool_size).map_err(|e| CliError::Config(e.to_string()))?;
    let out = args.out.clone().unwrap_or_else(|| cfg.out_dir.join("samples.jsonl"));
    let summary = sample_trajectories(&suites, policy.as_ref(), &sample_config(&cfg, schedule, out)).map_err(runtime)?;
    print!("{}", to_json(&summary));
    Ok(())
}

fn cmd_prepare(args: &PrepareArgs) -> Result<(), CliError> {
    let log = read_log(&args.log).map_err(runtime)?;
    let n = match args.mode {
        PrepareMode::Sft => {
            let sft = build_sft(&log);
            write_jsonl(&args.out, &sft).map_err(runtime)?;
            sft.len()
        }
        PrepareMode::Dpo => {
            let pairs = build_dpo_pairs(&log, args.max_pairs);
            write_jsonl(&args.out, &pairs).map_err(runtime)?;
            pairs.len()
        }
        PrepareMode::Rs => {
            let pairs = build_rs_pairs(&log).map_err(runtime)?;
            write_jsonl(&args.out, &pairs).map_err(runtime)?;
            pairs.len()
        }
    };
    println!("{n} example(s) written to {}", args.out.display());
    Ok(())
}

fn verifier_backend(args: &SelectArgs) -> Result<VerifierBackend, CliError> {
    match args.verifier {
        VerifierKind::Oracle => Ok(VerifierBackend::Oracle),
        VerifierKind::Scripted => {
            let path = args.table.as_ref().ok_or_else(|| CliError::Config("--table is required for the scripted verifier".into()))?;
            let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            VerifierBackend::scripted_from_json(&v).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
        }
        VerifierKind::Remote => {
            let url = args.url.as_ref().ok_or_else(|| CliError::Config("--url is required for the remote verifier".into()))?;
            Ok(VerifierBackend::remote(url.clone(), RetryConfig::default(), args.pool_size.max(1)))
        }
    }
}

/// Pass@K and Best@K for k = 1..=max_k.
pub fn selection_curves(log: &[Trajectory], max_k: Option<usize>) -> Result<Value, CliError> {
    let m = OutcomeMatrix::from_trajectories(log);
    let available = m.max_k();
    let k = max_k.unwrap_or(available);
    if k == 0 || k > available {
        return Err(runtime(format!("k = {k} exceeds the {available} rollout(s) every task has")));
    }
    let mut pass = serde_json::Map::new();
    let mut best = serde_json::Map::new();
    for i in 1..=k {
        pass.insert(i.to_string(), json!(pass_at_k(&m, i).map_err(runtime)?));
        best.insert(i.to_string(), json!(best_at_k_rate(&m, i).map_err(runtime)?));
    }
    Ok(json!({"tasks": m.rows.len(), "k": k, "pass_at_k": pass, "best_at_k": best}))
}

fn cmd_select(args: &SelectArgs) -> Result<(), CliError> {
    let backend = verifier_backend(args)?;
    let mut log = read_log(&args.log).map_err(runtime)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(args.pool_size.max(1)).build().map_err(runtime)?;
    let scores = pool.install(|| {
        log.par_iter().map(|t| score_trajectory(&backend, t)).collect::<Result<Vec<_>, _>>()
    });
    let scores = scores.map_err(runtime)?;
    for (t, s) in log.iter_mut().zip(scores) {
        t.verifier = Some(s);
    }
    let out = args.out.clone().unwrap_or_else(|| {
        let stem = args.log.file_stem().and_then(|s| s.to_str()).unwrap_or("log");
        args.log.with_file_name(format!("{stem}.scored.jsonl"))
    });
    let mut text = String::new();
    for t in &log {
        text.push_str(&serialize_trajectory(t).map_err(runtime)?);
        text.push('\n');
    }
    let tmp = out.with_extension("jsonl.tmp");
    write_file(&tmp, &text)?;
    fs::rename(&tmp, &out).map_err(|e| runtime(format!("cannot write {}: {e}", out.display())))?;

    let mut report = selection_curves(&log, args.k.map(|k| k as usize))?;
    report["scored_log"] = json!(out.display().to_string());
    if let Some(path) = &args.dataset {
        let data = build_verifier_dataset(&log, args.max_tokens, args.seed, &CharRatioEstimator::default());
        write_jsonl(path, &data).map_err(runtime)?;
        report["dataset_examples"] = json!(data.len());
    }
    match &args.report {
        Some(p) => write_file(p, &to_json(&report))?,
        None => print!("{}", to_json(&report)),
    }
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<(), CliError> {
    let mut summaries = Vec::new();
    for path in &args.paths {
        if path.extension().is_some_and(|e| e == "jsonl") {
            let log = read_log(path).map_err(runtime)?;
            summaries.push(render_report(&log).map_err(runtime)?.summary);
        } else {
            let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let s: Summary = serde_json::from_str(&text).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
            summaries.push(s);
        }
    }
    let merged = merge_summaries(summaries).map_err(runtime)?;
    match &args.out {
        Some(p) => {
            write_file(p, &to_json(&merged))?;
            print!("{}", render_text(&merged));
        }
        None => print!("{}", to_json(&merged)),
    }
    Ok(())
}

fn cmd_suite_ls(args: &RunArgs) -> Result<(), CliError> {
    let mut args = args.clone();
    if args.suites.is_empty() && args.config.is_none() {
        args.bundled = true;
    }
    let cfg = resolve_config(&args)?;
    for s in load_suites(&cfg)? {
        println!("{}\t{}\t{} task(s)\t{}", s.id(), s.descriptor.mode().as_str(), s.tasks.len(), s.descriptor.manifest_path.display());
    }
    Ok(())
}

fn cmd_validate(args: &RunArgs) -> Result<(), CliError> {
    let cfg = resolve_config(args)?;
    let suites = load_suites(&cfg)?;
    cfg.policy.build(cfg.pool_size).map_err(|e| CliError::Config(e.to_string()))?;
    let tasks: usize = suites.iter().map(|s| s.tasks.len()).sum();
    println!("ok: {} suite(s), {tasks} task(s)", suites.len());
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Eval(a) => cmd_eval(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Prepare(a) => cmd_prepare(a),
        Command::Select(a) => cmd_select(a),
        Command::Report(a) => cmd_report(a),
        Command::Suite { command: SuiteCommand::Ls(a) } => cmd_suite_ls(a),
        Command::Validate(a) => cmd_validate(a),
    }
}

/// Entry point for the `gym` binary.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
