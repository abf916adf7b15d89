//! Policies: scripted built-ins and a chat-completions endpoint client.

mod endpoint;
mod scripted;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::http::RetryConfig;
use crate::model::TaskSpec;
use crate::protocol::ChatMessage;
use crate::suites::SuiteDescriptor;

pub use endpoint::{EndpointConfig, EndpointPolicy};
pub use scripted::{
    gold_answer, CrashingPolicy, GoldPolicy, LoopingPolicy, ScriptPolicy, ScriptRule, SilentPolicy, CRASH_CODE,
    LOOP_CODE, SILENT_TEXT,
};

/// Everything a policy sees when asked for the next action.
#[derive(Debug, Clone, Copy)]
pub struct PolicyRequest<'a> {
    pub messages: &'a [ChatMessage],
    pub task: &'a TaskSpec,
    pub suite: &'a SuiteDescriptor,
    /// Zero-based turn being decided.
    pub turn: u32,
    /// Regeneration attempt within the turn, starting at 0.
    pub attempt: u32,
    pub temperature: f64,
    pub seed: u64,
    pub max_output_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyReply {
    pub text: String,
    /// Completion token count, when the backend reports it.
    pub output_tokens: Option<usize>,
    /// The backend stopped at the output-token cap.
    pub truncated: bool,
}

impl PolicyReply {
    pub fn text(text: impl Into<String>) -> Self {
        PolicyReply { text: text.into(), output_tokens: None, truncated: false }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("endpoint unreachable after {attempts} attempt(s): {last}")]
    TransportExhausted { attempts: u32, last: String },
    #[error("endpoint rejected credentials (HTTP {0})")]
    AuthFailed(u16),
    #[error("prompt exceeds the model context: {0}")]
    ContextOverflow(String),
    #[error("endpoint rejected the request: {0}")]
    Rejected(String),
    #[error("policy configuration: {0}")]
    Config(String),
}

pub trait Policy: Send + Sync {
    fn policy_id(&self) -> String;
    fn complete(&self, req: &PolicyRequest<'_>) -> Result<PolicyReply, PolicyError>;
}

/// Policy selection as written in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyConfig {
    Gold {
        #[serde(default)]
        latency_ms: u64,
    },
    Looping,
    Crashing,
    Silent,
    Script {
        #[serde(default)]
        replies: Vec<String>,
        #[serde(default)]
        rules: Vec<ScriptRule>,
    },
    Endpoint {
        base_url: String,
        model: String,
        /// Name of the environment variable holding the API key.
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default)]
        retry: RetryConfig,
        #[serde(default)]
        max_in_flight: Option<usize>,
        #[serde(default)]
        extra: serde_json::Map<String, serde_json::Value>,
    },
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig::Gold { latency_ms: 0 }
    }
}

impl PolicyConfig {
    /// Short name for flags: gold, looping, crashing, silent.
    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "gold" => PolicyConfig::Gold { latency_ms: 0 },
            "looping" => PolicyConfig::Looping,
            "crashing" => PolicyConfig::Crashing,
            "silent" => PolicyConfig::Silent,
            "debug" => PolicyConfig::Script { replies: vec![], rules: vec![] },
            _ => return None,
        })
    }

    pub fn build(&self, pool_size: usize) -> Result<Arc<dyn Policy>, PolicyError> {
        Ok(match self {
            PolicyConfig::Gold { latency_ms } => Arc::new(GoldPolicy { latency_ms: *latency_ms }),
            PolicyConfig::Looping => Arc::new(LoopingPolicy),
            PolicyConfig::Crashing => Arc::new(CrashingPolicy),
            PolicyConfig::Silent => Arc::new(SilentPolicy),
            PolicyConfig::Script { replies, rules } => Arc::new(ScriptPolicy::new(replies.clone(), rules.clone())),
            PolicyConfig::Endpoint { base_url, model, api_key_env, retry, max_in_flight, extra } => {
                if base_url.trim().is_empty() || model.trim().is_empty() {
                    return Err(PolicyError::Config("endpoint needs base_url and model".into()));
                }
                Arc::new(EndpointPolicy::new(EndpointConfig {
                    base_url: base_url.clone(),
                    model: model.clone(),
                    api_key_env: api_key_env.clone(),
                    retry: retry.clone(),
                    max_in_flight: max_in_flight.unwrap_or(pool_size.max(1)),
                    extra: extra.clone(),
                }))
            }
        })
    }
}
