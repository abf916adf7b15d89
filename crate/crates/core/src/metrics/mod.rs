//! Success rate, Pass@K, Best@K, leaderboard averaging, loop detection and
//! run reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Action, ActionKind, Trajectory};
use crate::verifier::best_index;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no inputs to aggregate")]
    EmptyInput,
    #[error("k = {k} needs {k} rollout(s) per task but task {task} has {available}")]
    InsufficientRollouts { k: usize, task: usize, available: usize },
    #[error("task {task} rollout {rollout} has no verifier score")]
    MissingScore { task: usize, rollout: usize },
    #[error("suite {0} appears in more than one report")]
    ConflictingSuite(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub success: bool,
    pub score: Option<f64>,
}

/// Tasks by rollouts; column i of a row is rollout_index i. Rows may differ
/// in length.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OutcomeMatrix {
    pub task_ids: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl OutcomeMatrix {
    pub fn from_successes(rows: &[Vec<bool>]) -> Self {
        OutcomeMatrix {
            task_ids: (0..rows.len()).map(|i| i.to_string()).collect(),
            rows: rows.iter().map(|r| r.iter().map(|&success| Cell { success, score: None }).collect()).collect(),
        }
    }

    pub fn from_scored(rows: &[Vec<(bool, f64)>]) -> Self {
        OutcomeMatrix {
            task_ids: (0..rows.len()).map(|i| i.to_string()).collect(),
            rows: rows
                .iter()
                .map(|r| r.iter().map(|&(success, s)| Cell { success, score: Some(s) }).collect())
                .collect(),
        }
    }

    /// Groups trajectories by (suite, task), sorted, placing each at its
    /// rollout index. A row stops at its first missing index.
    pub fn from_trajectories(trajectories: &[Trajectory]) -> Self {
        let mut grid: BTreeMap<(&str, &str), BTreeMap<u32, Cell>> = BTreeMap::new();
        for t in trajectories {
            let cell = Cell { success: t.verdict.success, score: t.verifier.map(|v| v.r) };
            grid.entry((&t.suite_id, &t.task_id)).or_default().insert(t.rollout_index, cell);
        }
        let mut m = OutcomeMatrix::default();
        for ((_, task), cells) in grid {
            let row: Vec<Cell> =
                cells.iter().enumerate().take_while(|(i, (idx, _))| **idx == *i as u32).map(|(_, (_, c))| *c).collect();
            m.task_ids.push(task.to_string());
            m.rows.push(row);
        }
        m
    }

    /// Largest k every task has rollouts for.
    pub fn max_k(&self) -> usize {
        self.rows.iter().map(Vec::len).min().unwrap_or(0)
    }

    /// Whether every cell among the first `k` of each row has a score.
    pub fn scored_through(&self, k: usize) -> bool {
        self.rows.iter().all(|r| r.len() >= k && r[..k].iter().all(|c| c.score.is_some()))
    }

    fn check_k(&self, k: usize) -> Result<(), MetricsError> {
        if self.rows.is_empty() {
            return Err(MetricsError::EmptyInput);
        }
        for (task, row) in self.rows.iter().enumerate() {
            if k == 0 || row.len() < k {
                return Err(MetricsError::InsufficientRollouts { k, task, available: row.len() });
            }
        }
        Ok(())
    }
}

pub fn success_rate(successes: &[bool]) -> Result<f64, MetricsError> {
    if successes.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(successes.iter().filter(|s| **s).count() as f64 / successes.len() as f64)
}

/// Fraction of tasks with a success among rollouts 0..k.
pub fn pass_at_k(m: &OutcomeMatrix, k: usize) -> Result<f64, MetricsError> {
    m.check_k(k)?;
    let solved = m.rows.iter().filter(|r| r[..k].iter().any(|c| c.success)).count();
    Ok(solved as f64 / m.rows.len() as f64)
}

/// Fraction of tasks whose highest-scored rollout among the first k (lowest
/// index on ties) is a success.
pub fn best_at_k_rate(m: &OutcomeMatrix, k: usize) -> Result<f64, MetricsError> {
    m.check_k(k)?;
    let mut hits = 0;
    for (task, row) in m.rows.iter().enumerate() {
        let scores: Vec<f64> = row[..k]
            .iter()
            .enumerate()
            .map(|(rollout, c)| c.score.ok_or(MetricsError::MissingScore { task, rollout }))
            .collect::<Result<_, _>>()?;
        let best = best_index(&scores, k).expect("length checked");
        hits += row[best].success as usize;
    }
    Ok(hits as f64 / m.rows.len() as f64)
}

/// Unweighted mean of per-suite scores.
pub fn overall_score(per_suite: &[f64]) -> Result<f64, MetricsError> {
    if per_suite.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(per_suite.iter().sum::<f64>() / per_suite.len() as f64)
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn action_signature(a: &Action) -> Option<String> {
    let payload = match a {
        Action::RequestInfo { query } => serde_json::to_string(query).unwrap_or_default(),
        Action::Terminal { command } => normalize(command),
        Action::CodeExecution { code } => normalize(code),
        Action::Debug => String::new(),
        Action::Submit { answer } => normalize(answer),
        Action::Invalid { .. } => return None,
    };
    Some(format!("{}:{payload}", a.kind()))
}

/// A failed trajectory whose last `window` actions are identical (same kind,
/// same whitespace-normalized payload). Unparsed turns never count.
pub fn detect_loop(t: &Trajectory, window: usize) -> bool {
    if t.verdict.success || window == 0 || t.turns.len() < window {
        return false;
    }
    let tail: Vec<Option<String>> = t.turns[t.turns.len() - window..].iter().map(|turn| action_signature(&turn.action)).collect();
    match &tail[0] {
        Some(first) => tail.iter().all(|s| s.as_ref() == Some(first)),
        None => false,
    }
}

pub const DEFAULT_LOOP_WINDOW: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteScore {
    pub sr: f64,
    pub acc: f64,
    pub n: usize,
}

/// Machine-readable run summary.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub suites: BTreeMap<String, SuiteScore>,
    pub overall: f64,
    pub pass_at_k: BTreeMap<usize, f64>,
    pub best_at_k: BTreeMap<usize, f64>,
    pub loop_fraction: f64,
    #[serde(default)]
    pub loop_count: usize,
    #[serde(default)]
    pub failures: usize,
    /// Per suite, the share of each interaction kind.
    #[serde(default)]
    pub action_composition: BTreeMap<String, BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub text: String,
    pub summary: Summary,
}

/// Summarizes a log. SR and Acc use each task's first rollout; Pass@K and
/// Best@K cover every k the log supports (Best@K only when scored).
pub fn summarize(trajectories: &[Trajectory], loop_window: usize) -> Result<Summary, MetricsError> {
    if trajectories.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut summary = Summary::default();
    let mut first: BTreeMap<&str, Vec<&Trajectory>> = BTreeMap::new();
    for t in trajectories.iter().filter(|t| t.rollout_index == 0) {
        first.entry(&t.suite_id).or_default().push(t);
    }
    for (suite, ts) in &first {
        let successes: Vec<bool> = ts.iter().map(|t| t.verdict.success).collect();
        let acc = ts.iter().map(|t| t.verdict.score).sum::<f64>() / ts.len() as f64;
        summary.suites.insert(suite.to_string(), SuiteScore { sr: success_rate(&successes)?, acc, n: ts.len() });
    }
    let srs: Vec<f64> = summary.suites.values().map(|s| s.sr).collect();
    summary.overall = if srs.is_empty() { 0.0 } else { overall_score(&srs)? };

    let m = OutcomeMatrix::from_trajectories(trajectories);
    for k in 1..=m.max_k() {
        summary.pass_at_k.insert(k, pass_at_k(&m, k)?);
        if m.scored_through(k) {
            summary.best_at_k.insert(k, best_at_k_rate(&m, k)?);
        }
    }

    let failures: Vec<&Trajectory> = trajectories.iter().filter(|t| !t.verdict.success).collect();
    summary.failures = failures.len();
    summary.loop_count = failures.iter().filter(|t| detect_loop(t, loop_window)).count();
    summary.loop_fraction =
        if failures.is_empty() { 0.0 } else { summary.loop_count as f64 / failures.len() as f64 };

    let mut counts: BTreeMap<&str, BTreeMap<ActionKind, usize>> = BTreeMap::new();
    for t in trajectories {
        let c = counts.entry(&t.suite_id).or_default();
        for turn in &t.turns {
            let kind = turn.action.kind();
            if ActionKind::COMPOSITION.contains(&kind) {
                *c.entry(kind).or_default() += 1;
            }
        }
    }
    for (suite, c) in counts {
        let total: usize = c.values().sum();
        let shares = ActionKind::COMPOSITION
            .iter()
            .map(|k| {
                let n = c.get(k).copied().unwrap_or(0);
                (k.as_str().to_string(), if total == 0 { 0.0 } else { n as f64 / total as f64 })
            })
            .collect();
        summary.action_composition.insert(suite.to_string(), shares);
    }
    Ok(summary)
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

/// Human-readable rendering of a summary.
pub fn render_text(s: &Summary) -> String {
    let mut out = String::new();
    out.push_str("| suite | n | SR (%) | Acc (%) |\n|---|---:|---:|---:|\n");
    for (id, sc) in &s.suites {
        let _ = writeln!(out, "| {id} | {} | {} | {} |", sc.n, pct(sc.sr), pct(sc.acc));
    }
    let _ = writeln!(out, "\noverall: {}", pct(s.overall));
    if !s.pass_at_k.is_empty() {
        out.push_str("\n| k | Pass@k (%) | Best@k (%) |\n|---:|---:|---:|\n");
        for (k, v) in &s.pass_at_k {
            let best = s.best_at_k.get(k).map(|b| pct(*b)).unwrap_or_else(|| "-".into());
            let _ = writeln!(out, "| {k} | {} | {best} |", pct(*v));
        }
    }
    let _ = writeln!(
        out,
        "\nloop errors: {} of {} failure(s) ({})",
        s.loop_count,
        s.failures,
        pct(s.loop_fraction)
    );
    if !s.action_composition.is_empty() {
        out.push_str("\n| suite |");
        for k in ActionKind::COMPOSITION {
            let _ = write!(out, " {k} (%) |");
        }
        out.push_str("\n|---|");
        out.push_str(&"---:|".repeat(ActionKind::COMPOSITION.len()));
        out.push('\n');
        for (suite, shares) in &s.action_composition {
            let _ = write!(out, "| {suite} |");
            for k in ActionKind::COMPOSITION {
                let _ = write!(out, " {} |", pct(shares.get(k.as_str()).copied().unwrap_or(0.0)));
            }
            out.push('\n');
        }
    }
    out
}

pub fn render_report(trajectories: &[Trajectory]) -> Result<Report, MetricsError> {
    let summary = summarize(trajectories, DEFAULT_LOOP_WINDOW)?;
    Ok(Report { text: render_text(&summary), summary })
}

/// Combines per-run summaries into one leaderboard. A single input passes
/// through unchanged; otherwise suites are unioned (a suite may appear only
/// once), curves are dropped and loop counts are pooled.
pub fn merge_summaries(inputs: Vec<Summary>) -> Result<Summary, MetricsError> {
    let mut inputs = inputs;
    match inputs.len() {
        0 => return Err(MetricsError::EmptyInput),
        1 => return Ok(inputs.remove(0)),
        _ => {}
    }
    let mut merged = Summary::default();
    for s in inputs {
        for (id, score) in s.suites {
            if merged.suites.insert(id.clone(), score).is_some() {
                return Err(MetricsError::ConflictingSuite(id));
            }
        }
        merged.action_composition.extend(s.action_composition);
        merged.failures += s.failures;
        merged.loop_count += s.loop_count;
    }
    let srs: Vec<f64> = merged.suites.values().map(|s| s.sr).collect();
    merged.overall = overall_score(&srs)?;
    merged.loop_fraction =
        if merged.failures == 0 { 0.0 } else { merged.loop_count as f64 / merged.failures as f64 };
    Ok(merged)
}
