//! Outcome verifiers, Best@K selection and verifier training sets.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::http::{JsonClient, RetryConfig};
use crate::model::{TokenEstimator, Trajectory, VerifierScore};
use crate::protocol::{flatten, full_conversation, ACTION_PROTOCOL};

/// Logits are clamped to this magnitude before use.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifierError {
    #[error("verifier backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("no scripted score for trajectory {0}")]
    MissingScore(String),
    #[error("need {k} rollout(s) but only {available} are available")]
    InsufficientRollouts { k: usize, available: usize },
}

/// Success probability from a YES/NO logit pair, in the overflow-free form
/// 1 / (1 + exp(l_no - l_yes)).
pub fn probability(l_yes: f64, l_no: f64) -> f64 {
    let y = l_yes.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    let n = l_no.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    1.0 / (1.0 + (n - y).exp())
}

pub fn score_from_logits(l_yes: f64, l_no: f64) -> VerifierScore {
    VerifierScore { l_yes, l_no, r: probability(l_yes, l_no) }
}

/// Source of logit pairs.
pub enum VerifierBackend {
    /// Reads the recorded verdict: success gives (+30, -30), failure the reverse.
    Oracle,
    /// Logit pairs keyed by trajectory id (`task_id#rollout_index`).
    Scripted(HashMap<String, (f64, f64)>),
    /// POSTs `{text}` and reads `{l_yes, l_no}`.
    Remote { url: String, client: JsonClient },
}

impl VerifierBackend {
    pub fn remote(url: impl Into<String>, retry: RetryConfig, max_in_flight: usize) -> Self {
        VerifierBackend::Remote { url: url.into(), client: JsonClient::new(retry, max_in_flight) }
    }

    /// Loads a scripted table from JSON: `{"task#0": [l_yes, l_no], ...}` or
    /// `{"task#0": {"l_yes": .., "l_no": ..}}`.
    pub fn scripted_from_json(v: &Value) -> Result<Self, String> {
        let obj = v.as_object().ok_or("scripted verifier table must be a JSON object")?;
        let mut table = HashMap::new();
        for (id, entry) in obj {
            let pair = match entry {
                Value::Array(a) if a.len() == 2 => (a[0].as_f64(), a[1].as_f64()),
                Value::Object(o) => (o.get("l_yes").and_then(Value::as_f64), o.get("l_no").and_then(Value::as_f64)),
                _ => (None, None),
            };
            match pair {
                (Some(y), Some(n)) => table.insert(id.clone(), (y, n)),
                _ => return Err(format!("entry {id:?} is not a logit pair")),
            };
        }
        Ok(VerifierBackend::Scripted(table))
    }
}

/// The transcript a verifier sees: the conversation as the policy saw it,
/// without verdict or reward.
pub fn verifier_input(t: &Trajectory) -> String {
    flatten(&full_conversation(ACTION_PROTOCOL, &t.turns, None))
}

pub fn score_trajectory(backend: &VerifierBackend, t: &Trajectory) -> Result<VerifierScore, VerifierError> {
    let (l_yes, l_no) = match backend {
        VerifierBackend::Oracle => {
            if t.verdict.success {
                (LOGIT_CLAMP, -LOGIT_CLAMP)
            } else {
                (-LOGIT_CLAMP, LOGIT_CLAMP)
            }
        }
        VerifierBackend::Scripted(table) => {
            let id = t.trajectory_id();
            *table.get(&id).ok_or(VerifierError::MissingScore(id))?
        }
        VerifierBackend::Remote { url, client } => {
            let resp = client
                .post(url, None, &json!({"text": verifier_input(t)}))
                .map_err(|e| VerifierError::BackendUnavailable(e.to_string()))?;
            let field = |k: &str| {
                resp.get(k)
                    .and_then(Value::as_f64)
                    .ok_or_else(|| VerifierError::BackendUnavailable(format!("response lacks numeric {k}: {resp}")))
            };
            (field("l_yes")?, field("l_no")?)
        }
    };
    Ok(score_from_logits(l_yes, l_no))
}

/// Index of the highest score among the first `k`; ties go to the lowest index.
pub fn best_index(scores: &[f64], k: usize) -> Result<usize, VerifierError> {
    if k == 0 || scores.len() < k {
        return Err(VerifierError::InsufficientRollouts { k, available: scores.len() });
    }
    let mut best = 0;
    for i in 1..k {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Best@K selection over trajectories ordered by rollout index.
pub fn best_at_k<'a>(scored: &'a [(Trajectory, VerifierScore)], k: usize) -> Result<&'a Trajectory, VerifierError> {
    let scores: Vec<f64> = scored.iter().map(|(_, s)| s.r).collect();
    Ok(&scored[best_index(&scores, k)?].0)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierExample {
    pub text: String,
    pub label: bool,
}

/// Renders every trajectory, drops those over `max_tokens`, then downsamples
/// the majority label (seeded) to exact balance. Output keeps log order.
pub fn build_verifier_dataset(
    trajectories: &[Trajectory],
    max_tokens: usize,
    seed: u64,
    est: &dyn TokenEstimator,
) -> Vec<VerifierExample> {
    let examples: Vec<VerifierExample> = trajectories
        .iter()
        .map(|t| VerifierExample { text: verifier_input(t), label: t.verdict.success })
        .filter(|e| est.estimate(&e.text) <= max_tokens)
        .collect();
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..examples.len()).partition(|&i| examples[i].label);
    if pos.is_empty() || neg.is_empty() {
        log::warn!("verifier dataset needs both labels; {} positive and {} negative after filtering", pos.len(), neg.len());
        return Vec::new();
    }
    let n = pos.len().min(neg.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: Vec<usize> = Vec::with_capacity(2 * n);
    for mut group in [pos, neg] {
        group.shuffle(&mut rng);
        keep.extend_from_slice(&group[..n]);
    }
    keep.sort_unstable();
    keep.into_iter().map(|i| examples[i].clone()).collect()
}
