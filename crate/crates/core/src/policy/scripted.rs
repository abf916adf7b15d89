//! Deterministic policies for tests and desk-scale runs.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::model::{GroundTruth, TaskSpec};
use crate::protocol::Role;
use crate::suites::{db_resource, reference_rows, SuiteDescriptor, DATA_DIRECTORY};

use super::{Policy, PolicyError, PolicyReply, PolicyRequest};

pub const LOOP_CODE: &str = "print('checking the data again')";
pub const CRASH_CODE: &str = "raise RuntimeError('scripted failure')";
pub const SILENT_TEXT: &str = "Let me think about this problem a little longer before acting.";

fn code_reply(code: &str) -> String {
    json!({"action": "code_execution", "code": code}).to_string()
}

fn submit_reply(answer: &str) -> String {
    json!({"action": "submit", "answer": answer}).to_string()
}

fn debug_reply() -> String {
    json!({"action": "debug"}).to_string()
}

fn format_number(v: f64) -> String {
    format!("{v}")
}

/// The answer the gold policy submits for a task.
pub fn gold_answer(task: &TaskSpec, suite: &SuiteDescriptor) -> Result<String, PolicyError> {
    let missing = |what: &str| PolicyError::Config(format!("task {} has no {what}", task.task_id));
    match &task.ground_truth {
        GroundTruth::ValueExact { value } => Ok(value.clone()),
        GroundTruth::Numeric { value, .. } => Ok(format_number(*value)),
        GroundTruth::ResultSet { gold_query } => {
            let db = db_resource(task, &suite.verification).ok_or_else(|| missing("database resource"))?;
            let rows = reference_rows(gold_query, &db.path).map_err(|e| PolicyError::Config(e.to_string()))?;
            Ok(rows.iter().map(|r| r.join("\t")).collect::<Vec<_>>().join("\n"))
        }
        GroundTruth::OutputSignature { .. } => {
            task.metadata.get("reference_code").cloned().ok_or_else(|| missing("reference_code metadata"))
        }
        GroundTruth::LabelFile { .. } => {
            Ok(task.metadata.get("gold_answer").cloned().unwrap_or_else(|| "predictions.csv".into()))
        }
    }
}

/// Code the gold policy runs before submitting, if any.
fn gold_prelude(task: &TaskSpec, suite: &SuiteDescriptor) -> Option<String> {
    if let Some(code) = task.metadata.get("gold_code") {
        return Some(code.clone());
    }
    match &task.ground_truth {
        GroundTruth::ResultSet { gold_query } => {
            let db = db_resource(task, &suite.verification)?;
            let literal = serde_json::to_string(gold_query).ok()?;
            Some(format!(
                "import sqlite3\n\
con = sqlite3.connect('file:{DATA_DIRECTORY}/{name}?mode=ro', uri=True)\n\
for row in con.execute({literal}):\n    print('\\t'.join(str(v) for v in row))\n",
                name = db.name
            ))
        }
        GroundTruth::OutputSignature { .. } => task.metadata.get("reference_code").cloned(),
        _ => None,
    }
}

/// Runs the task's gold code once (when it has any), then submits the gold
/// answer.
#[derive(Debug, Clone, Copy, Default)]
pub struct GoldPolicy {
    pub latency_ms: u64,
}

impl Policy for GoldPolicy {
    fn policy_id(&self) -> String {
        "gold".into()
    }

    fn complete(&self, req: &PolicyRequest<'_>) -> Result<PolicyReply, PolicyError> {
        if self.latency_ms > 0 {
            thread::sleep(Duration::from_millis(self.latency_ms));
        }
        if req.turn == 0 {
            if let Some(code) = gold_prelude(req.task, req.suite) {
                return Ok(PolicyReply::text(code_reply(&code)));
            }
        }
        Ok(PolicyReply::text(submit_reply(&gold_answer(req.task, req.suite)?)))
    }
}

/// Repeats one identical code action forever.
#[derive(Debug, Clone, Copy, Default)]
pub struct LoopingPolicy;

impl Policy for LoopingPolicy {
    fn policy_id(&self) -> String {
        "looping".into()
    }

    fn complete(&self, _req: &PolicyRequest<'_>) -> Result<PolicyReply, PolicyError> {
        Ok(PolicyReply::text(code_reply(LOOP_CODE)))
    }
}

/// Emits code that raises on every turn.
#[derive(Debug, Clone, Copy, Default)]
pub struct CrashingPolicy;

impl Policy for CrashingPolicy {
    fn policy_id(&self) -> String {
        "crashing".into()
    }

    fn complete(&self, _req: &PolicyRequest<'_>) -> Result<PolicyReply, PolicyError> {
        Ok(PolicyReply::text(code_reply(CRASH_CODE)))
    }
}

/// Answers with prose that never parses as an action.
#[derive(Debug, Clone, Copy, Default)]
pub struct SilentPolicy;

impl Policy for SilentPolicy {
    fn policy_id(&self) -> String {
        "silent".into()
    }

    fn complete(&self, _req: &PolicyRequest<'_>) -> Result<PolicyReply, PolicyError> {
        Ok(PolicyReply::text(SILENT_TEXT))
    }
}

/// Replies with `reply` whenever the latest observation contains `when`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub when: String,
    pub reply: String,
}

/// Pattern rules first, then the per-turn reply list; once both are
/// exhausted the policy asks for `debug`.
#[derive(Debug, Clone, Default)]
pub struct ScriptPolicy {
    pub replies: Vec<String>,
    pub rules: Vec<ScriptRule>,
    pub id: String,
}

impl ScriptPolicy {
    pub fn new(replies: Vec<String>, rules: Vec<ScriptRule>) -> Self {
        ScriptPolicy { replies, rules, id: "script".into() }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }
}

impl Policy for ScriptPolicy {
    fn policy_id(&self) -> String {
        self.id.clone()
    }

    fn complete(&self, req: &PolicyRequest<'_>) -> Result<PolicyReply, PolicyError> {
        let latest = req.messages.iter().rev().find(|m| m.role == Role::User).map(|m| m.content.as_str()).unwrap_or("");
        if let Some(rule) = self.rules.iter().find(|r| latest.contains(&r.when)) {
            return Ok(PolicyReply::text(rule.reply.clone()));
        }
        match self.replies.get(req.turn as usize) {
            Some(reply) => Ok(PolicyReply::text(reply.clone())),
            None => {
                log::debug!("script exhausted at turn {}; defaulting to debug", req.turn);
                Ok(PolicyReply::text(debug_reply()))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Action;
    use crate::protocol::{parse_action, ChatMessage, ParseOutcome};
    use crate::suites::load_suite;
    use crate::suites::{bundled_suites_dir, Suite};

    fn calc() -> Suite {
        load_suite(&bundled_suites_dir().join("calc/manifest.json")).unwrap()
    }

    fn req<'a>(suite: &'a Suite, task: &'a TaskSpec, messages: &'a [ChatMessage], turn: u32) -> PolicyRequest<'a> {
        PolicyRequest {
            messages,
            task,
            suite: &suite.descriptor,
            turn,
            attempt: 0,
            temperature: 0.0,
            seed: 0,
            max_output_tokens: 8192,
        }
    }

    fn action(reply: PolicyReply) -> Action {
        match parse_action(&reply.text) {
            ParseOutcome::Parsed { action, .. } => action,
            f => panic!("{f:?}"),
        }
    }

    #[test]
    fn gold_on_plain_value_task_submits_first() {
        let suite = calc();
        let mut task = suite.tasks[0].clone();
        task.metadata.remove("gold_code");
        task.ground_truth = GroundTruth::ValueExact { value: "4".into() };
        let a = action(GoldPolicy::default().complete(&req(&suite, &task, &[], 0)).unwrap());
        assert_eq!(a, Action::Submit { answer: "4".into() });
    }

    #[test]
    fn gold_runs_code_then_submits() {
        let suite = calc();
        let task = &suite.tasks[0];
        assert!(matches!(action(GoldPolicy::default().complete(&req(&suite, task, &[], 0)).unwrap()), Action::CodeExecution { .. }));
        assert!(matches!(action(GoldPolicy::default().complete(&req(&suite, task, &[], 1)).unwrap()), Action::Submit { .. }));
    }

    #[test]
    fn looping_and_silent() {
        let suite = calc();
        let task = &suite.tasks[0];
        let a0 = action(LoopingPolicy.complete(&req(&suite, task, &[], 0)).unwrap());
        let a5 = action(LoopingPolicy.complete(&req(&suite, task, &[], 5)).unwrap());
        assert_eq!(a0, a5);
        let r = SilentPolicy.complete(&req(&suite, task, &[], 0)).unwrap();
        assert!(matches!(parse_action(&r.text), ParseOutcome::Failure { .. }));
    }

    #[test]
    fn script_rules_then_replies_then_debug() {
        let suite = calc();
        let task = &suite.tasks[0];
        let p = ScriptPolicy::new(
            vec![code_reply("print(1)")],
            vec![ScriptRule { when: "Traceback".into(), reply: debug_reply() }],
        );
        assert!(matches!(action(p.complete(&req(&suite, task, &[], 0)).unwrap()), Action::CodeExecution { .. }));
        let msgs = [ChatMessage::new(Role::User, "Traceback (most recent call last)")];
        assert_eq!(action(p.complete(&req(&suite, task, &msgs, 0)).unwrap()), Action::Debug);
        assert_eq!(action(p.complete(&req(&suite, task, &[], 1)).unwrap()), Action::Debug);
    }
}
