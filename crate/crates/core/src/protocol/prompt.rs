//! Prompt templates and budgeted conversation rendering.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Observation, TaskSpec, TokenEstimator, Turn};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("placeholder `{{{0}}}` has no value")]
    UnresolvedPlaceholder(String),
    #[error("template `{template_id}` uses undeclared placeholder `{{{name}}}`")]
    UndeclaredPlaceholder { template_id: String, name: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    #[serde(default)]
    pub template_id: String,
    pub system_text: String,
    /// Declared placeholder names; defaults to those found in `system_text`.
    #[serde(default)]
    pub placeholders: Vec<String>,
}

impl PromptTemplate {
    pub fn new(template_id: impl Into<String>, system_text: impl Into<String>) -> Self {
        let system_text = system_text.into();
        let placeholders = placeholders_in(&system_text).into_iter().collect();
        PromptTemplate { template_id: template_id.into(), system_text, placeholders }
    }

    /// Fills in declared placeholders when none were listed and checks
    /// that every placeholder used is declared.
    pub fn validate(&mut self) -> Result<(), PromptError> {
        let used = placeholders_in(&self.system_text);
        if self.placeholders.is_empty() {
            self.placeholders = used.into_iter().collect();
            return Ok(());
        }
        for name in used {
            if !self.placeholders.contains(&name) {
                return Err(PromptError::UndeclaredPlaceholder { template_id: self.template_id.clone(), name });
            }
        }
        Ok(())
    }
}

fn is_placeholder_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Names of `{name}` placeholders. Braces around anything else (JSON
/// examples in prompts, for instance) are literal text.
pub fn placeholders_in(text: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_placeholder_name(&after[..close]) => {
                out.insert(after[..close].to_string());
                rest = &after[close + 1..];
            }
            _ => rest = after,
        }
    }
    out
}

/// Values available to templates: `question`, `task_id`, `data_directory`,
/// plus every metadata entry of the task.
pub fn task_vars(task: &TaskSpec, data_directory: &str) -> BTreeMap<String, String> {
    let mut vars: BTreeMap<String, String> = task.metadata.clone();
    vars.insert("question".into(), task.problem.clone());
    vars.insert("task_id".into(), task.task_id.clone());
    vars.insert("data_directory".into(), data_directory.to_string());
    vars
}

pub fn fill(text: &str, vars: &BTreeMap<String, String>) -> Result<String, PromptError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_placeholder_name(&after[..close]) => {
                let name = &after[..close];
                let value = vars.get(name).ok_or_else(|| PromptError::UnresolvedPlaceholder(name.to_string()))?;
                out.push_str(value);
                rest = &after[close + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// The task prompt shown at the start of an episode. The problem text is
/// appended when the template does not place `{question}` itself.
pub fn render_task_prompt(template: &PromptTemplate, vars: &BTreeMap<String, String>) -> Result<String, PromptError> {
    let mut text = fill(&template.system_text, vars)?;
    if !placeholders_in(&template.system_text).contains("question") {
        if let Some(q) = vars.get("question") {
            text.push_str("\n\nQuestion: ");
            text.push_str(q);
        }
    }
    Ok(text)
}

/// Scaffold instructions sent as the system message of every episode.
pub const ACTION_PROTOCOL: &str = "You are a coding agent solving a data task inside a sandbox. \
Each reply must be exactly one JSON object describing one action:\n\
- {\"action\": \"request_info\", \"query\": {\"type\": \"list_resources\"}} (also table_schema with \"table\", sample_rows with \"table\" and \"n\", file_head with \"name\" and \"n_lines\")\n\
- {\"action\": \"terminal\", \"command\": \"ls ../data\"}\n\
- {\"action\": \"code_execution\", \"code\": \"print(1)\"}\n\
- {\"action\": \"debug\"} to get an explanation of the last failed execution\n\
- {\"action\": \"submit\", \"answer\": \"...\"} to give the final answer\n\
Your code runs with the scratch directory as working directory; the task data is read-only.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        ChatMessage { role, content: content.into() }
    }
}

/// A rendered conversation ready for a policy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub messages: Vec<ChatMessage>,
    /// Number of turns dropped to fit the input budget.
    pub elided_turns: usize,
}

pub const ELISION_PREFIX: &str = "[... ";

fn elision_marker(n: usize) -> String {
    format!("{ELISION_PREFIX}{n} earlier turn(s) omitted to fit the context budget ...]")
}

/// Flat text the input budget is measured on.
pub fn flatten(messages: &[ChatMessage]) -> String {
    let mut out = String::new();
    for m in messages {
        out.push_str(m.role.as_str());
        out.push_str(":\n");
        out.push_str(&m.content);
        out.push_str("\n\n");
    }
    out
}

impl Prompt {
    pub fn estimate(&self, est: &dyn TokenEstimator) -> usize {
        est.estimate(&flatten(&self.messages))
    }

    pub fn text(&self) -> String {
        flatten(&self.messages)
    }
}

/// The full, untruncated conversation for a history.
pub fn full_conversation(system_text: &str, history: &[Turn], pending: Option<&Observation>) -> Vec<ChatMessage> {
    let mut msgs = vec![ChatMessage::new(Role::System, system_text)];
    for t in history {
        msgs.push(ChatMessage::new(Role::User, t.observation.content.clone()));
        msgs.push(ChatMessage::new(Role::Assistant, t.raw_model_text.clone()));
    }
    if let Some(o) = pending {
        msgs.push(ChatMessage::new(Role::User, o.content.clone()));
    }
    msgs
}

/// Renders system text plus history within `max_input_tokens`.
///
/// Oldest turns go first; the system text, the initial task prompt and the
/// two most recent turns are kept, with a single elision marker where turns
/// were removed. If that is still too large, the longest kept messages are
/// shortened in the middle until the estimate fits.
pub fn render_prompt(
    system_text: &str,
    history: &[Turn],
    pending: Option<&Observation>,
    max_input_tokens: usize,
    est: &dyn TokenEstimator,
) -> Prompt {
    let full = full_conversation(system_text, history, pending);
    if est.estimate(&flatten(&full)) <= max_input_tokens {
        return Prompt { messages: full, elided_turns: 0 };
    }

    // Droppable units, oldest first: unit 0 is the reply to the task
    // prompt, unit k >= 1 is turn k. The last two turns always stay.
    let n = history.len();
    let keep_from = n.saturating_sub(2);
    let assemble = |dropped: usize| -> Vec<ChatMessage> {
        let mut msgs = vec![full[0].clone()];
        if let Some(first) = history.first() {
            msgs.push(ChatMessage::new(Role::User, first.observation.content.clone()));
            if dropped == 0 {
                msgs.push(ChatMessage::new(Role::Assistant, first.raw_model_text.clone()));
            } else {
                msgs.push(ChatMessage::new(Role::User, elision_marker(dropped)));
            }
            for t in history.iter().skip(dropped.max(1)) {
                msgs.push(ChatMessage::new(Role::User, t.observation.content.clone()));
                msgs.push(ChatMessage::new(Role::Assistant, t.raw_model_text.clone()));
            }
        }
        if let Some(o) = pending {
            msgs.push(ChatMessage::new(Role::User, o.content.clone()));
        }
        msgs
    };

    let mut dropped = 0;
    let mut msgs = assemble(0);
    while dropped < keep_from {
        dropped += 1;
        msgs = assemble(dropped);
        if est.estimate(&flatten(&msgs)) <= max_input_tokens {
            return Prompt { messages: msgs, elided_turns: dropped };
        }
    }
    shrink_to_fit(&mut msgs, max_input_tokens, est);
    Prompt { messages: msgs, elided_turns: dropped }
}

/// Middle-truncates the longest non-marker message until the estimate fits;
/// as a last resort drops messages from the front, keeping the newest one.
fn shrink_to_fit(msgs: &mut Vec<ChatMessage>, budget: usize, est: &dyn TokenEstimator) {
    const CUT: &str = "\n[... truncated ...]\n";
    loop {
        let total = est.estimate(&flatten(msgs));
        if total <= budget {
            return;
        }
        let longest = msgs
            .iter()
            .enumerate()
            .filter(|(_, m)| !m.content.starts_with(ELISION_PREFIX))
            .max_by_key(|(i, m)| (m.content.chars().count(), usize::MAX - i))
            .map(|(i, _)| i);
        let Some(i) = longest else { break };
        let chars: Vec<char> = msgs[i].content.chars().collect();
        if chars.len() <= CUT.len() * 2 {
            break;
        }
        // remove enough characters to cover the overshoot, at least half
        let overshoot_chars = (total - budget) * 4 + CUT.len();
        let keep = chars.len().saturating_sub(overshoot_chars.max(chars.len() / 2));
        let head = keep / 2;
        let tail = keep - head;
        let mut s: String = chars[..head].iter().collect();
        s.push_str(CUT);
        s.extend(&chars[chars.len() - tail..]);
        msgs[i].content = s;
    }
    while msgs.len() > 1 && est.estimate(&flatten(msgs)) > budget {
        msgs.remove(0);
    }
    if est.estimate(&flatten(msgs)) > budget {
        if let Some(last) = msgs.last_mut() {
            last.content.clear();
        }
    }
}
