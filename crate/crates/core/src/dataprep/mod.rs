//! Fine-tuning datasets mined from trajectory logs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Action, Trajectory};
use crate::protocol::{flatten, full_conversation, ChatMessage, ACTION_PROTOCOL};

pub use crate::session::reward_of;

pub const DEFAULT_MAX_PAIRS_PER_TASK: usize = 4;

#[derive(Debug, Error)]
pub enum DataprepError {
    #[error("trajectory {0} has no verifier score; run `gym select` on the log first")]
    MissingScore(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub messages: Vec<ChatMessage>,
}

/// One conversation per successful trajectory, failures excluded.
pub fn build_sft(trajectories: &[Trajectory]) -> Vec<SftExample> {
    let out: Vec<SftExample> = trajectories
        .iter()
        .filter(|t| t.verdict.success)
        .map(|t| SftExample { messages: full_conversation(ACTION_PROTOCOL, &t.turns, None) })
        .collect();
    if out.is_empty() {
        log::warn!("no successful trajectories; the SFT set is empty");
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    Offline,
    Online,
    RejectionSampling,
}

/// Where one side of a pair came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Origin {
    pub rollout_index: u32,
    pub turn: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub task_id: String,
    /// Shared context: system text and the task's initial prompt.
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub source: PairSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_chosen: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_rejected: Option<f64>,
    #[serde(skip)]
    pub chosen_from: Option<Origin>,
    #[serde(skip)]
    pub rejected_from: Option<Origin>,
}

/// The context shared by every rollout of a task.
pub fn shared_prefix(t: &Trajectory) -> String {
    let msgs = full_conversation(ACTION_PROTOCOL, &[], None);
    let mut text = flatten(&msgs);
    if let Some(p) = t.initial_prompt() {
        text.push_str(&flatten(&[ChatMessage::new(crate::protocol::Role::User, p)]));
    }
    text
}

/// Everything after the initial prompt, as one completion text.
pub fn completion_text(t: &Trajectory) -> String {
    flatten(&full_conversation(ACTION_PROTOCOL, &t.turns, None)[2..])
}

fn by_task(trajectories: &[Trajectory]) -> BTreeMap<(&str, &str), Vec<&Trajectory>> {
    let mut groups: BTreeMap<(&str, &str), Vec<&Trajectory>> = BTreeMap::new();
    for t in trajectories {
        groups.entry((&t.suite_id, &t.task_id)).or_default().push(t);
    }
    for g in groups.values_mut() {
        g.sort_by_key(|t| t.rollout_index);
    }
    groups
}

/// The successful trajectory's final code response: its last code execution
/// that ran cleanly, else the submitting turn.
fn final_code_turn(t: &Trajectory) -> Option<usize> {
    let clean = t.turns.iter().rposition(|turn| {
        matches!(turn.action, Action::CodeExecution { .. }) && turn.exec.as_ref().is_some_and(|e| !e.failed())
    });
    clean.or_else(|| t.turns.iter().rposition(|turn| matches!(turn.action, Action::Submit { .. })))
}

fn failed_code_turns(t: &Trajectory) -> impl Iterator<Item = usize> + '_ {
    t.turns.iter().enumerate().filter_map(|(i, turn)| {
        let failed = matches!(turn.action, Action::CodeExecution { .. }) && turn.exec.as_ref().is_some_and(|e| e.failed());
        failed.then_some(i)
    })
}

/// Pairs a successful trajectory's final code response with executed code
/// attempts that failed, from the same trajectory first and then from the
/// task's other rollouts.
pub fn build_dpo_pairs(trajectories: &[Trajectory], max_pairs_per_task: usize) -> Vec<PreferencePair> {
    let mut out = Vec::new();
    for ((_, task_id), group) in by_task(trajectories) {
        let winners: Vec<(&Trajectory, usize)> = group
            .iter()
            .filter(|t| t.verdict.success)
            .filter_map(|t| final_code_turn(t).map(|i| (*t, i)))
            .collect();
        let errors: Vec<(&Trajectory, usize)> =
            group.iter().flat_map(|t| failed_code_turns(t).map(move |i| (*t, i))).collect();
        let mut pairs = Vec::new();
        for same_trajectory in [true, false] {
            for (win, wi) in &winners {
                for (lose, li) in &errors {
                    if pairs.len() == max_pairs_per_task {
                        break;
                    }
                    if (win.rollout_index == lose.rollout_index) != same_trajectory {
                        continue;
                    }
                    let prompt = shared_prefix(win);
                    if shared_prefix(lose) != prompt {
                        log::warn!("{task_id}: rollouts {} and {} differ in prompt", win.rollout_index, lose.rollout_index);
                        continue;
                    }
                    pairs.push(PreferencePair {
                        task_id: task_id.to_string(),
                        prompt,
                        chosen: win.turns[*wi].raw_model_text.clone(),
                        rejected: lose.turns[*li].raw_model_text.clone(),
                        source: PairSource::Offline,
                        r_chosen: win.verifier.map(|v| v.r),
                        r_rejected: lose.verifier.map(|v| v.r),
                        chosen_from: Some(Origin { rollout_index: win.rollout_index, turn: *wi }),
                        rejected_from: Some(Origin { rollout_index: lose.rollout_index, turn: *li }),
                    });
                }
            }
        }
        out.extend(pairs);
    }
    if out.is_empty() {
        log::warn!("no task has both a success and a failed code attempt; no DPO pairs");
    }
    out
}

fn pick<'a>(ts: &[&'a Trajectory], better: impl Fn(f64, f64) -> bool) -> Option<&'a Trajectory> {
    let mut best: Option<&Trajectory> = None;
    for t in ts {
        let r = t.verifier.expect("scores checked").r;
        if best.is_none_or(|b| better(r, b.verifier.expect("scores checked").r)) {
            best = Some(t);
        }
    }
    best
}

/// Per task, the highest-scored correct trajectory against the lowest-scored
/// incorrect one. Ties go to the lowest rollout index.
pub fn build_rs_pairs(trajectories: &[Trajectory]) -> Result<Vec<PreferencePair>, DataprepError> {
    if let Some(t) = trajectories.iter().find(|t| t.verifier.is_none()) {
        return Err(DataprepError::MissingScore(t.trajectory_id()));
    }
    let mut out = Vec::new();
    for ((_, task_id), group) in by_task(trajectories) {
        let (correct, incorrect): (Vec<&Trajectory>, Vec<&Trajectory>) =
            group.iter().partition(|t| t.verdict.success);
        let (Some(win), Some(lose)) = (pick(&correct, |a, b| a > b), pick(&incorrect, |a, b| a < b)) else {
            continue;
        };
        out.push(PreferencePair {
            task_id: task_id.to_string(),
            prompt: shared_prefix(win),
            chosen: completion_text(win),
            rejected: completion_text(lose),
            source: PairSource::RejectionSampling,
            r_chosen: win.verifier.map(|v| v.r),
            r_rejected: lose.verifier.map(|v| v.r),
            chosen_from: Some(Origin { rollout_index: win.rollout_index, turn: win.turns.len() - 1 }),
            rejected_from: Some(Origin { rollout_index: lose.rollout_index, turn: lose.turns.len() - 1 }),
        });
    }
    Ok(out)
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), DataprepError> {
    let io = |source| DataprepError::Io { path: path.display().to_string(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}
