//! Parallel, resumable sampling of K rollouts per task.

mod log;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Mutex};
use std::thread;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{now_ms, ActionKind, Budget, EndReason, Trajectory};
use crate::policy::Policy;
use crate::session::{aborted_trajectory, run_episode, EpisodeOptions, TrajectoryMeta};
use crate::suites::{BudgetOverrides, Suite};

pub use log::{read_log, Appender, RunLedger};

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("pool_size must be at least 1")]
    EmptyPool,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: malformed trajectory line: {message}")]
    MalformedLine { path: PathBuf, line: usize, message: String },
    #[error("log was written with config {expected} but this run has config {found}; use a new output path or the original settings")]
    ConfigMismatch { expected: String, found: String },
    #[error("log writer thread panicked")]
    WriterPanicked,
    #[error("could not build worker pool: {0}")]
    Pool(String),
}

/// Rollout count and per-rollout temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSchedule {
    pub k: u32,
    pub temperatures: Vec<f64>,
}

impl SampleSchedule {
    pub const DEFAULT_TEMPERATURE: f64 = 0.6;

    /// Greedy first rollout, then `DEFAULT_TEMPERATURE` for the rest.
    pub fn default_for(k: u32) -> Result<Self, RolloutError> {
        if k == 0 {
            return Err(RolloutError::InvalidSchedule("k must be at least 1".into()));
        }
        let mut temperatures = vec![0.0];
        temperatures.resize(k as usize, Self::DEFAULT_TEMPERATURE);
        Ok(SampleSchedule { k, temperatures })
    }

    pub fn new(temperatures: Vec<f64>) -> Result<Self, RolloutError> {
        let s = SampleSchedule { k: temperatures.len() as u32, temperatures };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), RolloutError> {
        if self.k == 0 {
            return Err(RolloutError::InvalidSchedule("k must be at least 1".into()));
        }
        if self.temperatures.len() != self.k as usize {
            return Err(RolloutError::InvalidSchedule(format!(
                "{} temperature(s) given for k = {}",
                self.temperatures.len(),
                self.k
            )));
        }
        if let Some(t) = self.temperatures.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
            return Err(RolloutError::InvalidSchedule(format!("temperature {t} is not a finite non-negative number")));
        }
        Ok(())
    }
}

/// Seed for rollout `index` of `task_id`: the first 8 bytes of
/// sha256("{base_seed}/{task_id}/{index}"), big-endian.
pub fn derive_seed(base_seed: u64, task_id: &str, index: u32) -> u64 {
    let digest = Sha256::digest(format!("{base_seed}/{task_id}/{index}").as_bytes());
    u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Scheduler used to run episodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Work-stealing thread pool.
    #[default]
    WorkStealing,
    /// Fixed worker threads pulling jobs from a shared counter.
    FixedWorkers,
}

#[derive(Clone)]
pub struct SampleConfig {
    pub schedule: SampleSchedule,
    pub pool_size: usize,
    pub base_seed: u64,
    pub backend: Backend,
    pub out_path: PathBuf,
    /// Budget, sandbox root and prompt settings shared by every episode;
    /// temperature, seed and rollout index are set per job.
    pub episode: EpisodeOptions,
    /// Operator overrides, applied after each suite's own limits.
    pub overrides: BudgetOverrides,
}

impl SampleConfig {
    pub fn new(schedule: SampleSchedule, out_path: impl Into<PathBuf>) -> Self {
        SampleConfig {
            schedule,
            pool_size: 1,
            base_seed: 0,
            backend: Backend::default(),
            out_path: out_path.into(),
            episode: EpisodeOptions::default(),
            overrides: BudgetOverrides::default(),
        }
    }
}

/// Hash of the settings that determine trajectory content. Stored on every
/// trajectory so that a resumed run can refuse to mix configurations.
pub fn config_hash(
    policy_id: &str,
    schedule: &SampleSchedule,
    base_seed: u64,
    budget: &Budget,
    overrides: &BudgetOverrides,
) -> String {
    let fingerprint = json!({
        "policy": policy_id,
        "temperatures": schedule.temperatures,
        "base_seed": base_seed,
        "budget": budget,
        "overrides": overrides,
    });
    let digest = Sha256::digest(fingerprint.to_string().as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    /// Jobs implied by tasks × k.
    pub jobs: usize,
    /// Jobs already present in the log.
    pub skipped: usize,
    /// Trajectories appended by this run.
    pub written: usize,
    pub successes: usize,
    pub failures: usize,
    pub by_reason: BTreeMap<String, usize>,
    pub config_hash: String,
}

struct Job<'a> {
    suite: &'a Suite,
    task: usize,
    index: u32,
}

fn run_job(job: &Job<'_>, policy: &dyn Policy, cfg: &SampleConfig, hash: &str) -> Trajectory {
    let task = &job.suite.tasks[job.task];
    let mut opts = cfg.episode.clone();
    opts.budget = cfg.overrides.apply(&job.suite.descriptor.limits.apply(&cfg.episode.budget));
    opts.temperature = cfg.schedule.temperatures[job.index as usize];
    opts.seed = derive_seed(cfg.base_seed, &task.task_id, job.index);
    opts.rollout_index = job.index;
    let meta = TrajectoryMeta {
        policy_id: policy.policy_id(),
        rollout_index: job.index,
        temperature: opts.temperature,
        seed: opts.seed,
        started_at: now_ms(),
    };
    let result = catch_unwind(AssertUnwindSafe(|| run_episode(policy, job.suite, task, &opts)));
    let mut t = match result {
        Ok(Ok(t)) => t,
        Ok(Err(e)) => {
            ::log::warn!("{} rollout {}: {e}", task.task_id, job.index);
            aborted_trajectory(job.suite, task, meta, e.to_string())
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "episode panicked".into());
            ::log::error!("{} rollout {} panicked: {msg}", task.task_id, job.index);
            aborted_trajectory(job.suite, task, meta, msg)
        }
    };
    t.info.config_hash = Some(hash.to_string());
    t
}

/// Runs every missing (task, rollout_index) job and appends each finished
/// trajectory to `cfg.out_path`. Jobs already in the log are skipped, so
/// calling this again after an interruption resumes the run.
pub fn sample_trajectories(
    suites: &[Suite],
    policy: &dyn Policy,
    cfg: &SampleConfig,
) -> Result<SampleSummary, RolloutError> {
    cfg.schedule.validate()?;
    if cfg.pool_size == 0 {
        return Err(RolloutError::EmptyPool);
    }
    let hash = config_hash(&policy.policy_id(), &cfg.schedule, cfg.base_seed, &cfg.episode.budget, &cfg.overrides);
    let ledger = RunLedger::recover(&cfg.out_path)?;
    if let Some(existing) = &ledger.config_hash {
        if *existing != hash {
            return Err(RolloutError::ConfigMismatch { expected: existing.clone(), found: hash });
        }
    }

    let mut summary = SampleSummary { config_hash: hash.clone(), ..SampleSummary::default() };
    let mut jobs = Vec::new();
    for suite in suites {
        for (ti, task) in suite.tasks.iter().enumerate() {
            for index in 0..cfg.schedule.k {
                summary.jobs += 1;
                if ledger.is_done(&task.task_id, index) {
                    summary.skipped += 1;
                } else {
                    jobs.push(Job { suite, task: ti, index });
                }
            }
        }
    }

    let appender = Appender::open(&cfg.out_path)?;
    let outcomes: Mutex<Vec<(bool, EndReason)>> = Mutex::new(Vec::with_capacity(jobs.len()));
    let work = |job: &Job<'_>, tx: &mpsc::Sender<Trajectory>| {
        let t = run_job(job, policy, cfg, &hash);
        outcomes.lock().expect("outcome lock").push((t.verdict.success, t.info.reason));
        if tx.send(t).is_err() {
            ::log::error!("log writer stopped; dropping a finished trajectory");
        }
    };
    match cfg.backend {
        Backend::WorkStealing => {
            use rayon::prelude::*;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.pool_size)
                .build()
                .map_err(|e| RolloutError::Pool(e.to_string()))?;
            let tx = appender.sender();
            pool.install(|| jobs.par_iter().for_each_with(tx, |tx, job| work(job, tx)));
        }
        Backend::FixedWorkers => {
            let next = AtomicUsize::new(0);
            thread::scope(|scope| {
                for _ in 0..cfg.pool_size.min(jobs.len().max(1)) {
                    let tx = appender.sender();
                    let (next, jobs, work) = (&next, &jobs, &work);
                    scope.spawn(move || loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(job) = jobs.get(i) else { break };
                        work(job, &tx);
                    });
                }
            });
        }
    }
    summary.written = appender.finish()?;

    for (success, reason) in outcomes.into_inner().expect("outcome lock") {
        if success {
            summary.successes += 1;
        } else {
            summary.failures += 1;
        }
        *summary.by_reason.entry(reason.as_str().to_string()).or_default() += 1;
    }
    Ok(summary)
}

/// Aggregate statistics over a trajectory log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    pub trajectories: usize,
    pub successes: usize,
    /// Mean turn count over successful trajectories.
    pub mean_turns_success: Option<f64>,
    /// Share of each interaction kind among a suite's interaction actions.
    pub action_proportions: BTreeMap<String, BTreeMap<String, f64>>,
    pub successes_by_suite: BTreeMap<String, (usize, usize)>,
}

pub fn stats_of(trajectories: &[Trajectory]) -> TrajectoryStats {
    let mut stats = TrajectoryStats { trajectories: trajectories.len(), ..TrajectoryStats::default() };
    let mut counts: BTreeMap<&str, BTreeMap<ActionKind, usize>> = BTreeMap::new();
    let mut success_turns = 0usize;
    for t in trajectories {
        let entry = stats.successes_by_suite.entry(t.suite_id.clone()).or_default();
        entry.1 += 1;
        if t.verdict.success {
            entry.0 += 1;
            stats.successes += 1;
            success_turns += t.turns.len();
        }
        let suite = counts.entry(t.suite_id.as_str()).or_default();
        for turn in &t.turns {
            let kind = turn.action.kind();
            if ActionKind::COMPOSITION.contains(&kind) {
                *suite.entry(kind).or_default() += 1;
            }
        }
    }
    if stats.successes > 0 {
        stats.mean_turns_success = Some(success_turns as f64 / stats.successes as f64);
    }
    for (suite, kinds) in counts {
        let total: usize = kinds.values().sum();
        if total == 0 {
            continue;
        }
        let props = kinds.into_iter().map(|(k, n)| (k.as_str().to_string(), n as f64 / total as f64)).collect();
        stats.action_proportions.insert(suite.to_string(), props);
    }
    stats
}

/// Statistics for the log at `path`; an empty log gives an empty report.
pub fn trajectory_stats(path: &Path) -> Result<TrajectoryStats, RolloutError> {
    Ok(stats_of(&read_log(path)?))
}

/// Tasks in run order, for callers that need the job list without running it.
pub fn job_keys(suites: &[Suite], k: u32) -> Vec<(String, u32)> {
    suites
        .iter()
        .flat_map(|s| s.tasks.iter())
        .flat_map(|t| (0..k).map(move |i| (t.task_id.clone(), i)))
        .collect()
}
