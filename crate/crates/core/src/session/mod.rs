//! The episode engine: one task, one workspace, one trajectory.

use std::path::{Component, Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::model::{
    now_ms, Action, Budget, CharRatioEstimator, EndReason, EpisodeInfo, ExecutionResult, ExitStatus, InvalidBudget,
    Observation, ObservationKind, RewardSignal, TaskSpec, TokenEstimator, Trajectory, Turn, Verdict,
};
use crate::policy::{Policy, PolicyRequest};
use crate::protocol::{
    has_code_fence, parse_action, render_prompt, ChatMessage, ErrorGrounder, ParseOutcome, PromptError, Role,
    RuleGrounder, ACTION_PROTOCOL,
};
use crate::sandbox::{create_workspace, CaptureMode, SandboxError, Workspace};
use crate::suites::{
    answer_info, db_resource, score_predictions, verify_exact, verify_output_signature, verify_result_set, Suite,
    VerificationMode, VerifyError,
};

pub const NO_FAILURE_NOTICE: &str = "no failed execution to debug";

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    InvalidBudget(#[from] InvalidBudget),
    #[error("session is already done")]
    SessionAlreadyDone,
    #[error("cannot render task prompt: {0}")]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum SessionState {
    Active,
    Done(Verdict),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub done: bool,
    /// Set once the session is done.
    pub reason: Option<EndReason>,
}

/// A live episode. Model latency never touches the wall clock kept here;
/// only time spent inside `step` is charged.
pub struct Session<'a> {
    suite: &'a Suite,
    task: &'a TaskSpec,
    ws: &'a Workspace,
    budget: Budget,
    capture: CaptureMode,
    grounder: Arc<dyn ErrorGrounder>,
    turns: Vec<Turn>,
    pending: Observation,
    last_exec: Option<ExecutionResult>,
    last_failed: Option<ExecutionResult>,
    last_answer: Option<String>,
    last_code: Option<String>,
    env_elapsed: Duration,
    state: SessionState,
    reason: Option<EndReason>,
    error: Option<String>,
}

impl<'a> Session<'a> {
    pub fn reset(
        suite: &'a Suite,
        task: &'a TaskSpec,
        budget: Budget,
        ws: &'a Workspace,
    ) -> Result<(Session<'a>, Observation), SessionError> {
        budget.validate()?;
        let prompt = suite.task_prompt(task)?;
        let observation = Observation { kind: ObservationKind::TaskPrompt, content: prompt, turn_index: 0 };
        let session = Session {
            suite,
            task,
            ws,
            budget,
            capture: suite.descriptor.capture_mode,
            grounder: Arc::new(RuleGrounder),
            turns: Vec::new(),
            pending: observation.clone(),
            last_exec: None,
            last_failed: None,
            last_answer: None,
            last_code: None,
            env_elapsed: Duration::ZERO,
            state: SessionState::Active,
            reason: None,
            error: None,
        };
        Ok((session, observation))
    }

    pub fn with_grounder(mut self, grounder: Arc<dyn ErrorGrounder>) -> Self {
        self.grounder = grounder;
        self
    }

    pub fn with_capture_mode(mut self, mode: CaptureMode) -> Self {
        self.capture = mode;
        self
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    /// The observation the next action responds to.
    pub fn pending(&self) -> &Observation {
        &self.pending
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn budget(&self) -> &Budget {
        &self.budget
    }

    pub fn last_exec(&self) -> Option<&ExecutionResult> {
        self.last_exec.as_ref()
    }

    pub fn last_answer(&self) -> Option<&str> {
        self.last_answer.as_deref()
    }

    pub fn env_elapsed(&self) -> Duration {
        self.env_elapsed
    }

    pub fn reason(&self) -> Option<EndReason> {
        self.reason
    }

    pub fn error(&self) -> Option<&str> {
        self.error.as_deref()
    }

    fn wall_budget(&self) -> Duration {
        Duration::from_secs_f64(self.budget.max_wall_s)
    }

    fn exec_timeout(&self) -> Duration {
        let remaining = self.wall_budget().saturating_sub(self.env_elapsed);
        Duration::from_secs_f64(self.budget.max_exec_s).min(remaining).max(Duration::from_millis(1))
    }

    pub fn step(&mut self, action: Action) -> Result<StepOutcome, SessionError> {
        let raw = serde_json::to_string(&action).unwrap_or_default();
        self.step_with_text(action, raw)
    }

    /// Applies one action. `raw_model_text` is what the policy produced.
    pub fn step_with_text(&mut self, action: Action, raw_model_text: String) -> Result<StepOutcome, SessionError> {
        if self.state != SessionState::Active {
            return Err(SessionError::SessionAlreadyDone);
        }
        let started = Instant::now();
        let next_index = self.turns.len() as u32 + 1;
        let mut exec = None;
        let mut submitted = None;
        let (kind, content) = match &action {
            Action::RequestInfo { query } => match answer_info(self.task, query, &self.suite.descriptor.info) {
                Ok(text) => (ObservationKind::InfoResult, text),
                Err(e) => (ObservationKind::InfoResult, format!("error: {e}")),
            },
            Action::Terminal { command } => {
                let result = match self.ws.execute_terminal(command, self.exec_timeout()) {
                    Ok(r) => r,
                    Err(SandboxError::CommandDenied { rule, detail }) => {
                        synthetic_failure(126, format!("command denied ({rule}): {detail}"))
                    }
                    Err(e) => synthetic_failure(127, e.to_string()),
                };
                let text = render_terminal(command, &result);
                self.note_exec(&result);
                exec = Some(result);
                (ObservationKind::TerminalResult, text)
            }
            Action::CodeExecution { code } => {
                let result = match self.ws.execute_code(code, self.exec_timeout(), self.capture) {
                    Ok(r) => r,
                    Err(e) => synthetic_failure(127, e.to_string()),
                };
                let text = self.render_exec(&result);
                self.note_exec(&result);
                if !result.failed() {
                    self.last_code = Some(code.clone());
                    if let Some(answer) = self.answer_from_exec(&result) {
                        self.last_answer = Some(answer);
                    }
                } else if self.last_code.is_none() && self.suite.descriptor.mode() == VerificationMode::OutputSignature {
                    self.last_code = Some(code.clone());
                }
                exec = Some(result);
                (ObservationKind::ExecResult, text)
            }
            Action::Debug => match &self.last_failed {
                Some(failed) => (ObservationKind::GroundedError, self.grounder.ground(failed).render()),
                None => (ObservationKind::BudgetNotice, NO_FAILURE_NOTICE.to_string()),
            },
            Action::Submit { answer } => {
                submitted = Some(answer.clone());
                (ObservationKind::BudgetNotice, "Answer received; the episode is over.".to_string())
            }
            Action::Invalid { diagnostic } => (
                ObservationKind::BudgetNotice,
                format!("Your reply could not be used as an action. {diagnostic}"),
            ),
        };
        let step_time = started.elapsed();
        self.env_elapsed += step_time;
        let observation_before = std::mem::replace(
            &mut self.pending,
            Observation { kind, content, turn_index: next_index },
        );
        self.turns.push(Turn {
            observation: observation_before,
            action,
            raw_model_text,
            exec,
            wall_ms: step_time.as_millis() as u64,
        });

        if let Some(answer) = submitted {
            let answer = if answer.trim().is_empty() && self.suite.descriptor.mode() == VerificationMode::OutputSignature {
                self.last_code.clone().unwrap_or_default()
            } else {
                answer
            };
            let verdict = self.verify(&answer);
            return Ok(self.finish(verdict, EndReason::Submitted));
        }
        if self.turns.len() as u32 >= self.budget.max_turns {
            return Ok(self.auto_finalize(EndReason::TurnBudget));
        }
        if self.env_elapsed >= self.wall_budget() {
            return Ok(self.auto_finalize(EndReason::WallBudget));
        }
        Ok(StepOutcome { observation: self.pending.clone(), done: false, reason: None })
    }

    /// Ends the episode after a policy failure, recording the failed turn.
    pub fn abort(&mut self, error: String, raw_model_text: String) -> StepOutcome {
        if self.state == SessionState::Active {
            let next_index = self.turns.len() as u32 + 1;
            let before = std::mem::replace(
                &mut self.pending,
                Observation {
                    kind: ObservationKind::BudgetNotice,
                    content: format!("episode aborted: {error}"),
                    turn_index: next_index,
                },
            );
            self.turns.push(Turn {
                observation: before,
                action: Action::Invalid { diagnostic: format!("policy error: {error}") },
                raw_model_text,
                exec: None,
                wall_ms: 0,
            });
        }
        self.error = Some(error.clone());
        self.finish(Verdict::failure(format!("aborted: {error}")), EndReason::Aborted)
    }

    fn finish(&mut self, verdict: Verdict, reason: EndReason) -> StepOutcome {
        self.state = SessionState::Done(verdict);
        self.reason = Some(reason);
        let observation = if reason == EndReason::Submitted || reason == EndReason::Aborted {
            self.pending.clone()
        } else {
            let notice = Observation {
                kind: ObservationKind::BudgetNotice,
                content: format!("The {} was exhausted; the episode is over.", match reason {
                    EndReason::TurnBudget => "turn budget",
                    _ => "session time budget",
                }),
                turn_index: self.pending.turn_index,
            };
            self.pending = notice.clone();
            notice
        };
        StepOutcome { observation, done: true, reason: Some(reason) }
    }

    fn auto_finalize(&mut self, reason: EndReason) -> StepOutcome {
        let answer = match self.suite.descriptor.mode() {
            VerificationMode::OutputSignature => self.last_code.clone(),
            _ => self.last_answer.clone(),
        };
        let verdict = match answer {
            Some(a) => {
                let mut v = self.verify(&a);
                v.detail = format!("auto-submitted last captured answer: {}", v.detail);
                v
            }
            None => Verdict::failure("budget exhausted without an answer"),
        };
        self.finish(verdict, reason)
    }

    fn note_exec(&mut self, result: &ExecutionResult) {
        if result.failed() {
            self.last_failed = Some(result.clone());
        }
        self.last_exec = Some(result.clone());
    }

    fn answer_from_exec(&self, exec: &ExecutionResult) -> Option<String> {
        if self.capture == CaptureMode::StdoutOnly && self.suite.descriptor.mode() == VerificationMode::ResultSet {
            let body = strip_truncation_marker(&exec.stdout).trim();
            return (!body.is_empty()).then(|| body.to_string());
        }
        exec.captured_answer.clone()
    }

    fn render_exec(&self, exec: &ExecutionResult) -> String {
        let mut out = String::new();
        if exec.failed() {
            out.push_str(&self.grounder.ground(exec).render());
            out.push_str("\n\n");
        }
        out.push_str("stdout:\n");
        out.push_str(if exec.stdout.is_empty() { "(empty)" } else { &exec.stdout });
        if !exec.failed() && !exec.stderr.trim().is_empty() {
            out.push_str("\nstderr:\n");
            out.push_str(&exec.stderr);
        }
        out
    }

    /// Checks an answer with the suite's verifier. Suite defects become a
    /// failed verdict and are recorded as the episode error.
    pub fn verify(&mut self, answer: &str) -> Verdict {
        match verify_answer(self.suite, self.task, self.ws, answer, &self.budget) {
            Ok(v) => v,
            Err(VerifyError::MalformedPredictionFile(m)) => Verdict::failure(format!("malformed prediction file: {m}")),
            Err(e) => {
                self.error = Some(e.to_string());
                Verdict::failure(format!("verification error: {e}"))
            }
        }
    }

    /// Completed trajectory; `None` while the session is active.
    pub fn into_trajectory(self, meta: TrajectoryMeta) -> Option<Trajectory> {
        let SessionState::Done(verdict) = self.state else {
            return None;
        };
        let mut info = EpisodeInfo::new(self.reason.unwrap_or(EndReason::Aborted));
        info.env_ms = self.env_elapsed.as_millis() as u64;
        info.error = self.error;
        let mut t = Trajectory {
            task_id: self.task.task_id.clone(),
            suite_id: self.task.suite_id.clone(),
            policy_id: meta.policy_id,
            rollout_index: meta.rollout_index,
            temperature: meta.temperature,
            seed: meta.seed,
            turns: self.turns,
            verdict,
            reward: RewardSignal { correctness: 0, format: 0 },
            info,
            verifier: None,
            started_at: meta.started_at,
            ended_at: now_ms(),
            extra: Default::default(),
        };
        t.reward = reward_of(&t);
        Some(t)
    }
}

#[derive(Debug, Clone)]
pub struct TrajectoryMeta {
    pub policy_id: String,
    pub rollout_index: u32,
    pub temperature: f64,
    pub seed: u64,
    pub started_at: u64,
}

fn synthetic_failure(code: i32, message: String) -> ExecutionResult {
    ExecutionResult {
        exit_status: ExitStatus::Code(code),
        stdout: String::new(),
        stderr: message,
        timed_out: false,
        wall_ms: 0,
        captured_answer: None,
        limit_ms: 0,
    }
}

fn strip_truncation_marker(s: &str) -> &str {
    if s.starts_with("[... ") {
        if let Some(nl) = s.find('\n') {
            return &s[nl + 1..];
        }
    }
    s
}

fn render_terminal(command: &str, r: &ExecutionResult) -> String {
    let mut out = format!("$ {command}\n");
    out.push_str(&r.stdout);
    if !r.stderr.is_empty() {
        if !out.ends_with('\n') {
            out.push('\n');
        }
        out.push_str(&r.stderr);
    }
    if r.timed_out {
        out.push_str(&format!("\n(command timed out after {} s)", r.limit_ms as f64 / 1000.0));
    } else if !r.exit_status.success() {
        match r.exit_status {
            ExitStatus::Code(c) => out.push_str(&format!("\n(exit status {c})")),
            ExitStatus::Signal(s) => out.push_str(&format!("\n(terminated by signal {s})")),
        }
    }
    out
}

/// A prediction file named by the agent, inside its scratch directory.
fn scratch_file(ws: &Workspace, answer: &str) -> Option<PathBuf> {
    let rel = Path::new(answer.trim());
    let rel = rel.strip_prefix("./").unwrap_or(rel);
    if answer.trim().is_empty() || !rel.components().all(|c| matches!(c, Component::Normal(_))) {
        return None;
    }
    Some(ws.scratch_dir().join(rel))
}

/// Dispatches an answer to the verifier for the suite's mode.
pub fn verify_answer(
    suite: &Suite,
    task: &TaskSpec,
    ws: &Workspace,
    answer: &str,
    budget: &Budget,
) -> Result<Verdict, VerifyError> {
    let cfg = &suite.descriptor.verification;
    match cfg.mode {
        VerificationMode::Exact => Ok(verify_exact(answer, &task.ground_truth, cfg.case_insensitive)),
        VerificationMode::ResultSet => {
            let crate::model::GroundTruth::ResultSet { gold_query } = &task.ground_truth else {
                return Err(VerifyError::WrongGroundTruth(task.ground_truth.variant_name()));
            };
            let db = db_resource(task, cfg).ok_or_else(|| VerifyError::GoldQueryFailed {
                query: gold_query.clone(),
                message: "task has no database resource".into(),
            })?;
            verify_result_set(answer, gold_query, &db.path, cfg)
        }
        VerificationMode::OutputSignature => {
            let entry = task.metadata.get("entry_point").map(String::as_str).unwrap_or("solve");
            verify_output_signature(ws, answer, &task.ground_truth, entry, Duration::from_secs_f64(budget.max_exec_s))
        }
        VerificationMode::LabelFile => match scratch_file(ws, answer) {
            Some(path) if path.is_file() => score_predictions(&path, &task.ground_truth, cfg),
            _ => Ok(Verdict::failure(format!("prediction file {:?} not found in the working directory", answer.trim()))),
        },
    }
}

/// Correctness from the verdict; format is 1 when any model output holds a
/// fenced code block or parsed as a code execution.
pub fn reward_of(t: &Trajectory) -> RewardSignal {
    let format = t
        .turns
        .iter()
        .any(|turn| matches!(turn.action, Action::CodeExecution { .. }) || has_code_fence(&turn.raw_model_text));
    RewardSignal { correctness: t.verdict.success as u8, format: format as u8 }
}

/// Settings for [`run_episode`].
#[derive(Clone)]
pub struct EpisodeOptions {
    pub budget: Budget,
    pub temperature: f64,
    pub seed: u64,
    pub rollout_index: u32,
    pub sandbox_root: PathBuf,
    /// Overrides the suite's capture mode.
    pub capture_mode: Option<CaptureMode>,
    /// Extra attempts after an unparseable reply, per turn.
    pub max_regenerations: u32,
    pub system_text: String,
    pub grounder: Arc<dyn ErrorGrounder>,
    pub estimator: Arc<dyn TokenEstimator>,
}

impl Default for EpisodeOptions {
    fn default() -> Self {
        EpisodeOptions {
            budget: Budget::default(),
            temperature: 0.0,
            seed: 0,
            rollout_index: 0,
            sandbox_root: crate::sandbox::default_root(),
            capture_mode: None,
            max_regenerations: 2,
            system_text: ACTION_PROTOCOL.to_string(),
            grounder: Arc::new(RuleGrounder),
            estimator: Arc::new(CharRatioEstimator::default()),
        }
    }
}

fn clip_to_tokens(text: &str, max_tokens: usize, est: &dyn TokenEstimator) -> String {
    let chars: Vec<char> = text.chars().collect();
    let total = est.estimate(text).max(1);
    let mut keep = chars.len() * max_tokens / total;
    loop {
        let candidate: String = chars[..keep.min(chars.len())].iter().collect();
        if est.estimate(&candidate) <= max_tokens || keep == 0 {
            return candidate;
        }
        keep -= 1;
    }
}

/// Runs one full episode in a fresh workspace, which is destroyed on return.
pub fn run_episode(
    policy: &dyn Policy,
    suite: &Suite,
    task: &TaskSpec,
    opts: &EpisodeOptions,
) -> Result<Trajectory, SessionError> {
    let started_at = now_ms();
    let ws = create_workspace(task, &opts.sandbox_root, &suite.descriptor.sandbox_config())?;
    let (session, _) = Session::reset(suite, task, opts.budget.clone(), &ws)?;
    let mut session = session.with_grounder(opts.grounder.clone());
    if let Some(mode) = opts.capture_mode {
        session = session.with_capture_mode(mode);
    }
    let est = opts.estimator.as_ref();
    let mut model_time = Duration::ZERO;
    let (mut fallback_parses, mut failed_parses, mut truncated_outputs) = (0u32, 0u32, 0u32);

    loop {
        let prompt = render_prompt(
            &opts.system_text,
            session.turns(),
            Some(session.pending()),
            opts.budget.max_input_tokens,
            est,
        );
        let mut messages: Vec<ChatMessage> = prompt.messages;
        let turn = session.turns().len() as u32;
        let mut chosen = None;
        let mut raw = String::new();
        let mut diagnostic = String::new();
        let mut aborted = None;
        for attempt in 0..=opts.max_regenerations {
            let req = PolicyRequest {
                messages: &messages,
                task,
                suite: &suite.descriptor,
                turn,
                attempt,
                temperature: opts.temperature,
                seed: opts.seed,
                max_output_tokens: opts.budget.max_output_tokens,
            };
            let t0 = Instant::now();
            let reply = policy.complete(&req);
            model_time += t0.elapsed();
            let reply = match reply {
                Ok(r) => r,
                Err(e) => {
                    aborted = Some(e.to_string());
                    break;
                }
            };
            let mut text = reply.text;
            if reply.truncated || est.estimate(&text) > opts.budget.max_output_tokens {
                truncated_outputs += 1;
                text = clip_to_tokens(&text, opts.budget.max_output_tokens, est);
            }
            raw = text;
            match parse_action(&raw) {
                ParseOutcome::Parsed { action, fallback } => {
                    fallback_parses += fallback as u32;
                    chosen = Some(action);
                    break;
                }
                ParseOutcome::Failure { diagnostic: d, .. } => {
                    failed_parses += 1;
                    diagnostic = d;
                    messages.push(ChatMessage::new(Role::Assistant, raw.clone()));
                    messages.push(ChatMessage::new(Role::User, diagnostic.clone()));
                }
            }
        }
        let outcome = match aborted {
            Some(error) => session.abort(error, raw),
            None => {
                let action = chosen.unwrap_or(Action::Invalid { diagnostic });
                session.step_with_text(action, raw)?
            }
        };
        if outcome.done {
            break;
        }
    }

    let meta = TrajectoryMeta {
        policy_id: policy.policy_id(),
        rollout_index: opts.rollout_index,
        temperature: opts.temperature,
        seed: opts.seed,
        started_at,
    };
    let mut t = session.into_trajectory(meta).expect("session finished");
    t.info.model_ms = model_time.as_millis() as u64;
    t.info.fallback_parses = fallback_parses;
    t.info.failed_parses = failed_parses;
    t.info.truncated_outputs = truncated_outputs;
    drop(ws);
    Ok(t)
}

/// A one-turn aborted trajectory for episodes that could not start.
pub fn aborted_trajectory(
    suite: &Suite,
    task: &TaskSpec,
    meta: TrajectoryMeta,
    error: String,
) -> Trajectory {
    let prompt = suite.task_prompt(task).unwrap_or_else(|_| task.problem.clone());
    let mut info = EpisodeInfo::new(EndReason::Aborted);
    info.error = Some(error.clone());
    let mut t = Trajectory {
        task_id: task.task_id.clone(),
        suite_id: task.suite_id.clone(),
        policy_id: meta.policy_id,
        rollout_index: meta.rollout_index,
        temperature: meta.temperature,
        seed: meta.seed,
        turns: vec![Turn {
            observation: Observation { kind: ObservationKind::TaskPrompt, content: prompt, turn_index: 0 },
            action: Action::Invalid { diagnostic: format!("episode could not run: {error}") },
            raw_model_text: String::new(),
            exec: None,
            wall_ms: 0,
        }],
        verdict: Verdict::failure(format!("aborted: {error}")),
        reward: RewardSignal { correctness: 0, format: 0 },
        info,
        verifier: None,
        started_at: meta.started_at,
        ended_at: now_ms(),
        extra: Default::default(),
    };
    t.reward = reward_of(&t);
    t
}
