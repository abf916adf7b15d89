//! Shared domain types and the trajectory log format.

mod task;
mod trajectory;

pub use task::{validate_task_spec, GroundTruth, Resource, TaskSpec, ValidationError};
pub use trajectory::{
    check_trajectory, now_ms, parse_trajectory, serialize_trajectory, Action, ActionKind, EndReason, EpisodeInfo,
    ExecutionResult, ExitStatus, InfoQuery, LogError, Observation, ObservationKind, RewardSignal, Trajectory, Turn,
    Verdict, VerifierScore,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Per-episode resource limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budget {
    pub max_turns: u32,
    /// Session wall budget in seconds; model latency is not charged.
    pub max_wall_s: f64,
    /// Limit for a single code or terminal execution, in seconds.
    pub max_exec_s: f64,
    pub max_input_tokens: usize,
    pub max_output_tokens: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Budget { max_turns: 15, max_wall_s: 120.0, max_exec_s: 120.0, max_input_tokens: 32_768, max_output_tokens: 8_192 }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid budget: {0}")]
pub struct InvalidBudget(pub String);

impl Budget {
    pub fn validate(&self) -> Result<(), InvalidBudget> {
        if self.max_turns == 0 {
            return Err(InvalidBudget("max_turns must be positive".into()));
        }
        for (name, v) in [("max_wall_s", self.max_wall_s), ("max_exec_s", self.max_exec_s)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(InvalidBudget(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_input_tokens == 0 || self.max_output_tokens == 0 {
            return Err(InvalidBudget("token caps must be positive".into()));
        }
        Ok(())
    }
}

/// Maps text to an approximate token count.
pub trait TokenEstimator: Send + Sync {
    fn estimate(&self, text: &str) -> usize;
}

/// `ceil(chars / chars_per_token)`, counting Unicode scalar values.
#[derive(Debug, Clone, Copy)]
pub struct CharRatioEstimator {
    pub chars_per_token: usize,
}

impl Default for CharRatioEstimator {
    fn default() -> Self {
        CharRatioEstimator { chars_per_token: 4 }
    }
}

impl TokenEstimator for CharRatioEstimator {
    fn estimate(&self, text: &str) -> usize {
        text.chars().count().div_ceil(self.chars_per_token.max(1))
    }
}

/// Default estimator: one token per four characters, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    CharRatioEstimator::default().estimate(text)
}
