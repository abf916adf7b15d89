//! Random trajectories for property and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use gym_core::model::{
    Action, EndReason, EpisodeInfo, ExecutionResult, ExitStatus, InfoQuery, Observation, ObservationKind,
    RewardSignal, Trajectory, Turn, Verdict, VerifierScore,
};
use gym_core::session::reward_of;
use gym_core::verifier::score_from_logits;
use rand::Rng;
use serde_json::json;

const ALPHABET: &[char] = &[
    'a', 'b', 'z', 'Q', '0', '9', ' ', '\n', '\t', '"', '\\', '/', '{', '}', '\u{0}', '\u{1f}', 'é', 'ß', '中', '🙂',
    '\u{2028}', '`',
];

pub fn text(rng: &mut impl Rng, max_len: usize) -> String {
    let n = rng.random_range(0..=max_len);
    (0..n).map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())]).collect()
}

fn exec(rng: &mut impl Rng, failed: bool) -> ExecutionResult {
    let exit_status = if failed {
        if rng.random_bool(0.2) { ExitStatus::Signal(9) } else { ExitStatus::Code(rng.random_range(1..=255)) }
    } else {
        ExitStatus::Code(0)
    };
    ExecutionResult {
        exit_status,
        stdout: text(rng, 30),
        stderr: if failed { format!("Traceback\n{}", text(rng, 20)) } else { String::new() },
        timed_out: failed && rng.random_bool(0.1),
        wall_ms: rng.random(),
        captured_answer: rng.random_bool(0.3).then(|| text(rng, 8)),
        limit_ms: rng.random_range(0..200_000),
    }
}

fn random_action(rng: &mut impl Rng) -> (Action, Option<ExecutionResult>) {
    match rng.random_range(0..7) {
        0 => (Action::RequestInfo { query: InfoQuery::ListResources }, None),
        1 => (
            Action::RequestInfo { query: InfoQuery::SampleRows { table: text(rng, 6), n: rng.random_range(0..30) } },
            None,
        ),
        2 => {
            let failed = rng.random_bool(0.5);
            (Action::Terminal { command: text(rng, 12) }, Some(exec(rng, failed)))
        }
        3 | 4 => {
            let failed = rng.random_bool(0.5);
            (Action::CodeExecution { code: format!("print({:?})", text(rng, 15)) }, Some(exec(rng, failed)))
        }
        5 => (Action::Debug, None),
        _ => (Action::Invalid { diagnostic: text(rng, 10) }, None),
    }
}

/// A structurally valid trajectory with random content. When `success` is
/// set, the verdict follows it; when `scored`, a verifier score is attached.
pub fn trajectory(
    rng: &mut impl Rng,
    suite_id: &str,
    task_id: &str,
    rollout_index: u32,
    prompt: &str,
    success: Option<bool>,
    scored: bool,
) -> Trajectory {
    let n = rng.random_range(1..=8);
    let mut turns = Vec::with_capacity(n);
    for i in 0..n {
        let (action, exec) = if i + 1 == n && rng.random_bool(0.6) {
            (Action::Submit { answer: text(rng, 10) }, None)
        } else {
            random_action(rng)
        };
        let raw_model_text = match &action {
            Action::CodeExecution { code } => json!({"action": "code_execution", "code": code}).to_string(),
            Action::Invalid { .. } => text(rng, 20),
            other => serde_json::to_string(other).unwrap(),
        };
        let kind = if i == 0 { ObservationKind::TaskPrompt } else { ObservationKind::ExecResult };
        let content = if i == 0 { prompt.to_string() } else { text(rng, 40) };
        turns.push(Turn {
            observation: Observation { kind, content, turn_index: i as u32 },
            action,
            raw_model_text,
            exec,
            wall_ms: rng.random_range(0..10_000),
        });
    }
    let success = success.unwrap_or_else(|| rng.random_bool(0.5));
    let verdict = Verdict { success, score: if success { 1.0 } else { rng.random_range(0.0..1.0) }, detail: text(rng, 12) };
    let reason = [EndReason::Submitted, EndReason::TurnBudget, EndReason::WallBudget, EndReason::Aborted]
        [rng.random_range(0..4)];
    let mut info = EpisodeInfo::new(reason);
    info.failed_parses = rng.random_range(0..5);
    info.model_ms = rng.random();
    info.config_hash = rng.random_bool(0.5).then(|| format!("{:016x}", rng.random::<u64>()));
    info.error = rng.random_bool(0.2).then(|| text(rng, 10));
    let verifier: Option<VerifierScore> =
        scored.then(|| score_from_logits(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0)));
    let mut extra = BTreeMap::new();
    if rng.random_bool(0.3) {
        extra.insert("x_note".to_string(), json!({"k": text(rng, 5), "v": rng.random::<f64>(), "n": rng.random::<u32>()}));
    }
    let mut t = Trajectory {
        task_id: task_id.into(),
        suite_id: suite_id.into(),
        policy_id: text(rng, 6),
        rollout_index,
        temperature: rng.random_range(0.0..2.0),
        seed: rng.random(),
        turns,
        verdict,
        reward: RewardSignal { correctness: 0, format: 0 },
        info,
        verifier,
        started_at: rng.random(),
        ended_at: rng.random(),
        extra,
    };
    t.reward = reward_of(&t);
    t
}

/// A log of `tasks` tasks with 1..=max_rollouts rollouts each.
pub fn log(rng: &mut impl Rng, tasks: usize, max_rollouts: u32, scored: bool) -> Vec<Trajectory> {
    let mut out = Vec::new();
    for i in 0..tasks {
        let task_id = format!("task-{i:04}");
        let prompt = format!("Question {i}: {}", text(rng, 20));
        let k = rng.random_range(1..=max_rollouts);
        for r in 0..k {
            out.push(trajectory(rng, "suite", &task_id, r, &prompt, None, scored));
        }
    }
    out
}
