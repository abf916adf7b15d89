use std::path::Path;
use std::sync::atomic::{AtomicU32, Ordering};
use std::time::{Duration, Instant};

use gym_core::model::{check_trajectory, Action, Budget, EndReason, GroundTruth, ObservationKind, Trajectory};
use gym_core::policy::{
    CrashingPolicy, GoldPolicy, LoopingPolicy, Policy, PolicyError, PolicyReply, PolicyRequest, ScriptPolicy,
    SilentPolicy,
};
use gym_core::sandbox::{create_workspace, hash_tree};
use gym_core::session::{run_episode, EpisodeOptions, Session, SessionError, NO_FAILURE_NOTICE};
use gym_core::suites::{bundled_suites_dir, load_suite, Suite};
use serde_json::json;

fn suite(name: &str) -> Suite {
    load_suite(&bundled_suites_dir().join(name).join("manifest.json")).unwrap()
}

fn opts(root: &Path) -> EpisodeOptions {
    EpisodeOptions { sandbox_root: root.to_path_buf(), ..EpisodeOptions::default() }
}

fn run(policy: &dyn Policy, suite: &Suite, idx: usize, o: &EpisodeOptions) -> Trajectory {
    let t = run_episode(policy, suite, &suite.tasks[idx], o).unwrap();
    check_trajectory(&t).unwrap();
    t
}

fn code(c: &str) -> String {
    json!({"action": "code_execution", "code": c}).to_string()
}

#[test]
fn gold_policy_solves_a_sql_task_quickly() {
    let root = tempfile::tempdir().unwrap();
    let s = suite("ehr_sql");
    let t = run(&GoldPolicy::default(), &s, 7, &opts(root.path()));
    assert!(t.verdict.success, "{}", t.verdict.detail);
    assert!(t.turns.len() <= 3);
    assert_eq!(t.info.reason, EndReason::Submitted);
    assert_eq!(t.reward.correctness, 1);
    assert!(t.turns[0].observation.content.contains("../data"));
}

#[test]
fn always_debug_runs_out_the_turn_budget() {
    let root = tempfile::tempdir().unwrap();
    let s = suite("calc");
    let t = run(&ScriptPolicy::default(), &s, 0, &opts(root.path()));
    assert_eq!(t.turns.len(), 15);
    assert!(!t.verdict.success);
    assert_eq!(t.info.reason, EndReason::TurnBudget);
    assert_eq!(t.reward.format, 0);
    assert!(t.turns.iter().all(|turn| turn.action == Action::Debug));
    assert_eq!(t.turns[1].observation.kind, ObservationKind::BudgetNotice);
    assert_eq!(t.turns[1].observation.content, NO_FAILURE_NOTICE);
}

#[test]
fn silent_policy_is_bounded_by_regeneration() {
    let root = tempfile::tempdir().unwrap();
    let s = suite("calc");
    let mut o = opts(root.path());
    o.budget.max_turns = 5;
    let t = run(&SilentPolicy, &s, 0, &o);
    assert_eq!(t.turns.len(), 5);
    assert!(t.turns.iter().all(|turn| matches!(turn.action, Action::Invalid { .. })));
    assert_eq!(t.info.failed_parses, 15);
    assert_eq!(t.reward, gym_core::model::RewardSignal { correctness: 0, format: 0 });
}

#[test]
fn zero_turn_budget_is_rejected() {
    let root = tempfile::tempdir().unwrap();
    let s = suite("calc");
    let ws = create_workspace(&s.tasks[0], root.path(), &s.descriptor.sandbox_config()).unwrap();
    let budget = Budget { max_turns: 0, ..Budget::default() };
    assert!(matches!(Session::reset(&s, &s.tasks[0], budget, &ws), Err(SessionError::InvalidBudget(_))));
}

#[test]
fn manual_steps_and_submit() {
    let root = tempfile::tempdir().unwrap();
    let mut s = suite("calc");
    s.tasks[0].ground_truth = GroundTruth::ValueExact { value: "4".into() };
    let task = s.tasks[0].clone();
    let ws = create_workspace(&task, root.path(), &s.descriptor.sandbox_config()).unwrap();
    let (mut session, first) = Session::reset(&s, &task, Budget::default(), &ws).unwrap();
    assert!(first.content.contains(&task.problem));
    let out = session.step(Action::Debug).unwrap();
    assert_eq!(out.observation.content, NO_FAILURE_NOTICE);
    let out = session.step(Action::CodeExecution { code: "print(undefined_name)".into() }).unwrap();
    assert!(!out.done && out.observation.content.contains("NameError"));
    let out = session.step(Action::Debug).unwrap();
    assert_eq!(out.observation.kind, ObservationKind::GroundedError);
    assert!(out.observation.content.contains("is not defined"));
    let out = session.step(Action::Submit { answer: "4".into() }).unwrap();
    assert!(out.done);
    assert!(matches!(session.step(Action::Debug), Err(SessionError::SessionAlreadyDone)));
}

#[test]
fn timeout_is_enforced_and_episode_continues() {
    let root = tempfile::tempdir().unwrap();
    let s = suite("calc");
    let mut o = opts(root.path());
    o.budget.max_exec_s = 1.0;
    o.budget.max_turns = 2;
    let policy = ScriptPolicy::new(vec![code("while True:\n    pass"), code("print(1)")], vec![]);
    let t = run(&policy, &s, 0, &o);
    let first = t.turns[0].exec.as_ref().unwrap();
    assert!(first.timed_out);
    assert!(first.wall_ms < 1500, "{}", first.wall_ms);
    assert!(t.turns[1].observation.content.contains("time limit of 1 s"));
    assert!(t.turns[1].exec.as_ref().unwrap().exit_status.success());
}

#[test]
fn budget_exhaustion_auto_submits_captured_answer() {
    let root = tempfile::tempdir().unwrap();
    let s = suite("calc");
    let mut o = opts(root.path());
    o.budget.max_turns = 1;
    let gold_code = s.tasks[0].metadata["gold_code"].clone();
    let t = run(&ScriptPolicy::new(vec![code(&gold_code)], vec![]), &s, 0, &o);
    assert_eq!(t.info.reason, EndReason::TurnBudget);
    assert!(t.verdict.success, "{}", t.verdict.detail);
}

#[test]
fn model_latency_is_not_charged_to_the_wall_budget() {
    let root = tempfile::tempdir().unwrap();
    let s = suite("calc");
    let mut o = opts(root.path());
    o.budget.max_wall_s = 1.0;
    let t = run(&GoldPolicy { latency_ms: 700 }, &s, 0, &o);
    assert!(t.verdict.success);
    assert_eq!(t.info.reason, EndReason::Submitted);
    assert!(t.info.model_ms >= 1400);
}

#[test]
fn wall_budget_ends_the_episode() {
    let root = tempfile::tempdir().unwrap();
    let s = suite("calc");
    let mut o = opts(root.path());
    o.budget.max_wall_s = 1.0;
    let started = Instant::now();
    let policy = ScriptPolicy::new(vec![code("import time\ntime.sleep(0.4)"); 15], vec![]);
    let t = run(&policy, &s, 0, &o);
    assert_eq!(t.info.reason, EndReason::WallBudget);
    assert!(t.turns.len() < 15);
    assert!(started.elapsed() < Duration::from_secs(3));
}

struct Unreachable(AtomicU32);

impl Policy for Unreachable {
    fn policy_id(&self) -> String {
        "down".into()
    }
    fn complete(&self, req: &PolicyRequest<'_>) -> Result<PolicyReply, PolicyError> {
        self.0.fetch_add(1, Ordering::SeqCst);
        if req.turn == 0 {
            return Ok(PolicyReply::text(code("print(1)")));
        }
        Err(PolicyError::TransportExhausted { attempts: 4, last: "connection refused".into() })
    }
}

#[test]
fn transport_failure_aborts() {
    let root = tempfile::tempdir().unwrap();
    let s = suite("calc");
    let t = run(&Unreachable(AtomicU32::new(0)), &s, 0, &opts(root.path()));
    assert_eq!(t.info.reason, EndReason::Aborted);
    assert!(!t.verdict.success);
    assert!(t.info.error.as_deref().unwrap().contains("connection refused"));
    assert_eq!(t.turns.len(), 2);
}

#[test]
fn looping_and_crashing_policies_fail() {
    let root = tempfile::tempdir().unwrap();
    let s = suite("ehr_sql");
    let mut o = opts(root.path());
    o.budget.max_turns = 4;
    let t = run(&LoopingPolicy, &s, 0, &o);
    assert_eq!(t.turns.len(), 4);
    assert!(!t.verdict.success);
    assert_eq!(t.reward.format, 1);
    let t = run(&CrashingPolicy, &s, 0, &o);
    assert!(!t.verdict.success);
    assert!(t.turns[1].observation.content.contains("RuntimeError"));
}

#[test]
fn output_signature_tasks() {
    let root = tempfile::tempdir().unwrap();
    let s = suite("funcsig");
    let o = opts(root.path());
    for i in 0..s.tasks.len() {
        let t = run(&GoldPolicy::default(), &s, i, &o);
        assert!(t.verdict.success, "{}: {}", s.tasks[i].task_id, t.verdict.detail);
    }
    // a different algorithm with the same outputs passes; a crash on input 1 fails
    let alt = "def identity(x):\n    return [v for v in x] if isinstance(x, list) else x\n";
    let submit = json!({"action": "submit", "answer": alt}).to_string();
    assert!(run(&ScriptPolicy::new(vec![submit], vec![]), &s, 0, &o).verdict.success);
    let crashy = "def identity(x):\n    if x == 17:\n        raise ValueError('bad')\n    return x\n";
    let submit = json!({"action": "submit", "answer": crashy}).to_string();
    let t = run(&ScriptPolicy::new(vec![submit], vec![]), &s, 0, &o);
    assert!(!t.verdict.success);
    assert!(t.verdict.detail.contains("input 1"), "{}", t.verdict.detail);
}

#[test]
fn prediction_task_scores_accuracy() {
    let root = tempfile::tempdir().unwrap();
    let s = suite("predict");
    let t = run(&GoldPolicy::default(), &s, 0, &opts(root.path()));
    assert!(t.verdict.success, "{}", t.verdict.detail);
    assert_eq!(t.verdict.score, 1.0);
    let submit = json!({"action": "submit", "answer": "nothing.csv"}).to_string();
    let t = run(&ScriptPolicy::new(vec![submit], vec![]), &s, 0, &opts(root.path()));
    assert!(!t.verdict.success);
}

#[test]
fn hostile_writes_leave_data_untouched() {
    let root = tempfile::tempdir().unwrap();
    let s = suite("ehr_sql");
    let task = s.tasks[0].clone();
    let ws = create_workspace(&task, root.path(), &s.descriptor.sandbox_config()).unwrap();
    let before = hash_tree(ws.data_dir()).unwrap();
    let (mut session, _) = Session::reset(&s, &task, Budget::default(), &ws).unwrap();
    let attacks = [
        Action::CodeExecution { code: "import os\nos.remove('../data/ehr.db')".into() },
        Action::CodeExecution { code: "open('../data/ehr.db', 'w').write('gone')".into() },
        Action::CodeExecution {
            code: "import sqlite3\nsqlite3.connect('../data/ehr.db').execute('DROP TABLE patients')".into(),
        },
        Action::Terminal { command: "rm ../data/ehr.db".into() },
        Action::Terminal { command: "touch ../data/new".into() },
    ];
    for a in attacks {
        let out = session.step(a).unwrap();
        assert!(!out.done);
        let exec = session.last_exec().unwrap();
        assert!(exec.failed(), "attack succeeded: {}", out.observation.content);
        assert!(
            out.observation.content.contains("Error") || out.observation.content.contains("denied"),
            "{}",
            out.observation.content
        );
    }
    assert_eq!(hash_tree(ws.data_dir()).unwrap(), before);
}
