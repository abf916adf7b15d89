//! Chat-completions endpoint backend.

use serde_json::{json, Map, Value};

use crate::http::{HttpError, JsonClient, RetryConfig};

use super::{Policy, PolicyError, PolicyReply, PolicyRequest};

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointConfig {
    /// Base URL; requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the API key. The key itself is never logged.
    pub api_key_env: Option<String>,
    pub retry: RetryConfig,
    pub max_in_flight: usize,
    /// Passed through verbatim in the request body (thinking toggles etc.).
    pub extra: Map<String, Value>,
}

pub struct EndpointPolicy {
    config: EndpointConfig,
    client: JsonClient,
}

impl EndpointPolicy {
    pub fn new(config: EndpointConfig) -> Self {
        let client = JsonClient::new(config.retry.clone(), config.max_in_flight);
        EndpointPolicy { config, client }
    }

    pub fn url(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }
}

fn looks_like_overflow(body: &str) -> bool {
    let b = body.to_ascii_lowercase();
    b.contains("context") && (b.contains("length") || b.contains("window") || b.contains("exceed"))
        || b.contains("too many tokens")
}

impl Policy for EndpointPolicy {
    fn policy_id(&self) -> String {
        format!("endpoint:{}", self.config.model)
    }

    fn complete(&self, req: &PolicyRequest<'_>) -> Result<PolicyReply, PolicyError> {
        if req.messages.is_empty() {
            return Err(PolicyError::Config("empty message list".into()));
        }
        let mut body = json!({
            "model": self.config.model,
            "messages": req.messages.iter().map(|m| json!({"role": m.role.as_str(), "content": m.content})).collect::<Vec<_>>(),
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        });
        if let Some(obj) = body.as_object_mut() {
            for (k, v) in &self.config.extra {
                obj.entry(k.clone()).or_insert_with(|| v.clone());
            }
        }
        let key = match &self.config.api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| PolicyError::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let resp = self.client.post(&self.url(), key.as_deref(), &body).map_err(|e| match e {
            HttpError::Exhausted { attempts, last } => PolicyError::TransportExhausted { attempts, last },
            HttpError::Auth(status) => PolicyError::AuthFailed(status),
            HttpError::Rejected { status, body } if (status == 400 || status == 413) && looks_like_overflow(&body) => {
                PolicyError::ContextOverflow(body)
            }
            HttpError::Rejected { status, body } => PolicyError::Rejected(format!("HTTP {status}: {body}")),
        })?;
        let choice = resp.pointer("/choices/0").ok_or_else(|| PolicyError::Rejected("response has no choices".into()))?;
        let text = match choice.pointer("/message/content") {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Null) | None => choice.get("text").and_then(Value::as_str).unwrap_or("").to_string(),
            Some(other) => other.to_string(),
        };
        let output_tokens = resp.pointer("/usage/completion_tokens").and_then(Value::as_u64).map(|n| n as usize);
        let truncated = choice.get("finish_reason").and_then(Value::as_str) == Some("length");
        Ok(PolicyReply { text, output_tokens, truncated })
    }
}
