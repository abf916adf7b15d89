//! Actions, observations and the trajectory record written to run logs.

use std::collections::BTreeMap;
use std::fmt;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// An information request against the task's data resources.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InfoQuery {
    ListResources,
    TableSchema { table: String },
    SampleRows { table: String, n: usize },
    FileHead { name: String, n_lines: usize },
}

impl InfoQuery {
    pub const MAX_SAMPLE_ROWS: usize = 20;
    pub const MAX_HEAD_LINES: usize = 50;

    /// Returns the query with row and line counts clamped to their caps.
    pub fn capped(self) -> Self {
        match self {
            InfoQuery::SampleRows { table, n } => InfoQuery::SampleRows { table, n: n.min(Self::MAX_SAMPLE_ROWS) },
            InfoQuery::FileHead { name, n_lines } => {
                InfoQuery::FileHead { name, n_lines: n_lines.min(Self::MAX_HEAD_LINES) }
            }
            q => q,
        }
    }
}

/// One agent move. `Invalid` records a turn whose model output could not be
/// turned into any other action (parse failure or transport abort).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    RequestInfo { query: InfoQuery },
    Terminal { command: String },
    CodeExecution { code: String },
    Debug,
    Submit { answer: String },
    Invalid { diagnostic: String },
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::RequestInfo { .. } => ActionKind::RequestInfo,
            Action::Terminal { .. } => ActionKind::Terminal,
            Action::CodeExecution { .. } => ActionKind::CodeExecution,
            Action::Debug => ActionKind::Debug,
            Action::Submit { .. } => ActionKind::Submit,
            Action::Invalid { .. } => ActionKind::Invalid,
        }
    }

    /// Whether a turn taking this action must carry an execution result.
    pub fn executes(&self) -> bool {
        matches!(self, Action::CodeExecution { .. } | Action::Terminal { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    RequestInfo,
    Terminal,
    CodeExecution,
    Debug,
    Submit,
    Invalid,
}

impl ActionKind {
    pub const ALL: [ActionKind; 6] = [
        ActionKind::RequestInfo,
        ActionKind::Terminal,
        ActionKind::CodeExecution,
        ActionKind::Debug,
        ActionKind::Submit,
        ActionKind::Invalid,
    ];

    /// The interaction kinds counted in action-composition tables.
    pub const COMPOSITION: [ActionKind; 4] =
        [ActionKind::RequestInfo, ActionKind::Terminal, ActionKind::CodeExecution, ActionKind::Debug];

    pub fn as_str(&self) -> &'static str {
        match self {
            ActionKind::RequestInfo => "request_info",
            ActionKind::Terminal => "terminal",
            ActionKind::CodeExecution => "code_execution",
            ActionKind::Debug => "debug",
            ActionKind::Submit => "submit",
            ActionKind::Invalid => "invalid",
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationKind {
    TaskPrompt,
    InfoResult,
    ExecResult,
    GroundedError,
    TerminalResult,
    BudgetNotice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub kind: ObservationKind,
    pub content: String,
    pub turn_index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitStatus {
    Code(i32),
    Signal(i32),
}

impl ExitStatus {
    pub fn success(&self) -> bool {
        matches!(self, ExitStatus::Code(0))
    }
}

impl fmt::Display for ExitStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExitStatus::Code(c) => write!(f, "{c}"),
            ExitStatus::Signal(s) => write!(f, "signal {s}"),
        }
    }
}

/// Outcome of one sandboxed code or terminal execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub exit_status: ExitStatus,
    pub stdout: String,
    pub stderr: String,
    pub timed_out: bool,
    pub wall_ms: u64,
    pub captured_answer: Option<String>,
    /// Per-execution limit in effect, in milliseconds.
    #[serde(default)]
    pub limit_ms: u64,
}

impl ExecutionResult {
    pub fn failed(&self) -> bool {
        self.timed_out || !self.exit_status.success()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub observation: Observation,
    pub action: Action,
    pub raw_model_text: String,
    pub exec: Option<ExecutionResult>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub success: bool,
    pub score: f64,
    pub detail: String,
}

impl Verdict {
    pub fn failure(detail: impl Into<String>) -> Self {
        Verdict { success: false, score: 0.0, detail: detail.into() }
    }

    pub fn exact(success: bool, detail: impl Into<String>) -> Self {
        Verdict { success, score: if success { 1.0 } else { 0.0 }, detail: detail.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardSignal {
    pub correctness: u8,
    pub format: u8,
}

/// Logit pair from an outcome verifier and the derived success probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifierScore {
    pub l_yes: f64,
    pub l_no: f64,
    pub r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    Submitted,
    TurnBudget,
    WallBudget,
    Aborted,
}

impl EndReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            EndReason::Submitted => "submitted",
            EndReason::TurnBudget => "turn_budget",
            EndReason::WallBudget => "wall_budget",
            EndReason::Aborted => "aborted",
        }
    }
}

/// Per-episode bookkeeping persisted alongside the trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeInfo {
    pub reason: EndReason,
    #[serde(default)]
    pub fallback_parses: u32,
    #[serde(default)]
    pub failed_parses: u32,
    #[serde(default)]
    pub truncated_outputs: u32,
    /// Time spent waiting on the policy, excluded from the session wall budget.
    #[serde(default)]
    pub model_ms: u64,
    /// Time charged against the session wall budget.
    #[serde(default)]
    pub env_ms: u64,
    #[serde(default)]
    pub config_hash: Option<String>,
    #[serde(default)]
    pub error: Option<String>,
}

impl EpisodeInfo {
    pub fn new(reason: EndReason) -> Self {
        EpisodeInfo {
            reason,
            fallback_parses: 0,
            failed_parses: 0,
            truncated_outputs: 0,
            model_ms: 0,
            env_ms: 0,
            config_hash: None,
            error: None,
        }
    }
}

/// A complete episode record: one line of a trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub suite_id: String,
    pub policy_id: String,
    pub rollout_index: u32,
    pub temperature: f64,
    pub seed: u64,
    pub turns: Vec<Turn>,
    pub verdict: Verdict,
    pub reward: RewardSignal,
    pub info: EpisodeInfo,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verifier: Option<VerifierScore>,
    /// UTC epoch milliseconds.
    pub started_at: u64,
    pub ended_at: u64,
    /// Keys written by other tools; carried through parse and serialize.
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl Trajectory {
    /// Stable identifier used by scripted verifier tables.
    pub fn trajectory_id(&self) -> String {
        format!("{}#{}", self.task_id, self.rollout_index)
    }

    pub fn initial_prompt(&self) -> Option<&str> {
        self.turns.first().map(|t| t.observation.content.as_str())
    }

    /// Copy with every wall-clock derived field zeroed, for comparing runs.
    pub fn canonicalized(&self) -> Trajectory {
        let mut t = self.clone();
        t.started_at = 0;
        t.ended_at = 0;
        t.info.model_ms = 0;
        t.info.env_ms = 0;
        for turn in &mut t.turns {
            turn.wall_ms = 0;
            if let Some(exec) = &mut turn.exec {
                exec.wall_ms = 0;
                exec.limit_ms = 0;
            }
        }
        t
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("malformed trajectory line at byte offset {offset}: {message}")]
    MalformedLine { offset: usize, message: String },
    #[error("trajectory violates invariant: {0}")]
    InvalidTrajectory(String),
    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
}

/// Checks the structural invariants every logged trajectory must satisfy.
pub fn check_trajectory(t: &Trajectory) -> Result<(), LogError> {
    if t.turns.is_empty() {
        return Err(LogError::InvalidTrajectory("trajectory has no turns".into()));
    }
    for (i, turn) in t.turns.iter().enumerate() {
        if turn.observation.turn_index as usize != i {
            return Err(LogError::InvalidTrajectory(format!(
                "turn {i} carries turn_index {}",
                turn.observation.turn_index
            )));
        }
        if turn.action.executes() != turn.exec.is_some() {
            return Err(LogError::InvalidTrajectory(format!(
                "turn {i}: execution record present={} for action {}",
                turn.exec.is_some(),
                turn.action.kind()
            )));
        }
    }
    if (t.reward.correctness == 1) != t.verdict.success || t.reward.correctness > 1 || t.reward.format > 1 {
        return Err(LogError::InvalidTrajectory("reward.correctness disagrees with verdict".into()));
    }
    Ok(())
}

/// Renders a trajectory as one JSON line (no trailing newline).
pub fn serialize_trajectory(t: &Trajectory) -> Result<String, LogError> {
    check_trajectory(t)?;
    Ok(serde_json::to_string(t)?)
}

pub fn parse_trajectory(line: &str) -> Result<Trajectory, LogError> {
    let t: Trajectory = serde_json::from_str(line).map_err(|e| {
        let offset = line
            .split('\n')
            .take(e.line().saturating_sub(1))
            .map(|l| l.len() + 1)
            .sum::<usize>()
            + e.column().saturating_sub(1);
        LogError::MalformedLine { offset, message: e.to_string() }
    })?;
    check_trajectory(&t)?;
    Ok(t)
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample() -> Trajectory {
        Trajectory {
            task_id: "t1".into(),
            suite_id: "s".into(),
            policy_id: "gold".into(),
            rollout_index: 0,
            temperature: 0.0,
            seed: 7,
            turns: vec![Turn {
                observation: Observation { kind: ObservationKind::TaskPrompt, content: "q".into(), turn_index: 0 },
                action: Action::Submit { answer: "4".into() },
                raw_model_text: "{\"action\":\"submit\",\"answer\":\"4\"}".into(),
                exec: None,
                wall_ms: 1,
            }],
            verdict: Verdict::exact(true, "match"),
            reward: RewardSignal { correctness: 1, format: 0 },
            info: EpisodeInfo::new(EndReason::Submitted),
            verifier: None,
            started_at: 1,
            ended_at: 2,
            extra: BTreeMap::new(),
        }
    }

    #[test]
    fn empty_turns_rejected() {
        let mut t = sample();
        t.turns.clear();
        assert!(matches!(serialize_trajectory(&t), Err(LogError::InvalidTrajectory(_))));
    }

    #[test]
    fn truncated_line_is_malformed_with_offset() {
        let line = serialize_trajectory(&sample()).unwrap();
        let cut = &line[..line.len() / 2];
        match parse_trajectory(cut) {
            Err(LogError::MalformedLine { offset, .. }) => assert!(offset <= cut.len()),
            other => panic!("expected MalformedLine, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_survive_round_trip() {
        let line = serialize_trajectory(&sample()).unwrap();
        let with_extra = format!("{},\"annotator\":{{\"tag\":\"x\"}}}}", &line[..line.len() - 1]);
        let t = parse_trajectory(&with_extra).unwrap();
        assert_eq!(t.extra["annotator"]["tag"], "x");
        let again = serialize_trajectory(&t).unwrap();
        assert!(again.contains("\"annotator\":{\"tag\":\"x\"}"));
    }

    #[test]
    fn action_wire_shape() {
        let a: Action = serde_json::from_str(r#"{"action":"code_execution","code":"print(1)"}"#).unwrap();
        assert_eq!(a, Action::CodeExecution { code: "print(1)".into() });
        let d: Action = serde_json::from_str(r#"{"action":"debug"}"#).unwrap();
        assert_eq!(d, Action::Debug);
        assert_eq!(serde_json::to_string(&Action::Debug).unwrap(), r#"{"action":"debug"}"#);
    }
}
