//! Model text to [`Action`] conversion.

use serde_json::Value;

use crate::model::{Action, InfoQuery};

#[derive(Debug, Clone, PartialEq)]
pub enum ParseOutcome {
    /// `fallback` is set when the action came from a fenced code block
    /// rather than a structured object.
    Parsed { action: Action, fallback: bool },
    Failure { diagnostic: String, recoverable: bool },
}

pub const ACTION_NAMES: [&str; 5] = ["request_info", "terminal", "code_execution", "debug", "submit"];

pub const EXPECTED_SHAPE: &str = "Respond with exactly one JSON object with an \"action\" field, one of \
request_info (with \"query\"), terminal (with \"command\"), code_execution (with \"code\"), debug, \
or submit (with \"answer\"). Example: {\"action\": \"code_execution\", \"code\": \"print(1)\"}";

/// Converts raw model output into an action. Never fails: unusable text
/// becomes a recoverable failure whose diagnostic can go back to the model.
pub fn parse_action(model_text: &str) -> ParseOutcome {
    let mut structured_error = None;
    for candidate in json_candidates(model_text) {
        let Ok(value) = serde_json::from_str::<Value>(&candidate) else {
            continue;
        };
        if value.get("action").is_none() {
            continue;
        }
        match action_from_value(&value) {
            Ok(action) => return ParseOutcome::Parsed { action, fallback: false },
            Err(e) => {
                structured_error.get_or_insert(e);
            }
        }
    }
    if let Some(e) = structured_error {
        return ParseOutcome::Failure { diagnostic: format!("{e}. {EXPECTED_SHAPE}"), recoverable: true };
    }
    if let Some(code) = last_code_fence(model_text) {
        if !code.trim().is_empty() {
            return ParseOutcome::Parsed { action: Action::CodeExecution { code }, fallback: true };
        }
    }
    ParseOutcome::Failure {
        diagnostic: format!("No action could be parsed from your reply. {EXPECTED_SHAPE}"),
        recoverable: true,
    }
}

fn action_from_value(v: &Value) -> Result<Action, String> {
    let name = v
        .get("action")
        .and_then(Value::as_str)
        .ok_or_else(|| "the \"action\" field must be a string".to_string())?;
    let text_field = |key: &str| -> Result<String, String> {
        match v.get(key) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(Value::Null) | None => Err(format!("action \"{name}\" requires a \"{key}\" field")),
            Some(other) => Ok(other.to_string()),
        }
    };
    match name {
        "request_info" => Ok(Action::RequestInfo { query: parse_info_query(v.get("query").unwrap_or(&Value::Null))? }),
        "terminal" => {
            let command = text_field("command")?;
            if command.trim().is_empty() {
                return Err("terminal command must be non-empty".into());
            }
            Ok(Action::Terminal { command })
        }
        "code_execution" => {
            let code = text_field("code")?;
            if code.trim().is_empty() {
                return Err("code must be non-empty".into());
            }
            Ok(Action::CodeExecution { code })
        }
        "debug" | "debugging" => Ok(Action::Debug),
        "submit" => Ok(Action::Submit { answer: text_field("answer")? }),
        other => Err(format!("unknown action \"{other}\" (expected one of {})", ACTION_NAMES.join(", "))),
    }
}

/// Accepts either a tagged object (`{"type": "sample_rows", "table": .., "n": ..}`)
/// or a short string form (`"sample_rows patients 3"`).
pub fn parse_info_query(v: &Value) -> Result<InfoQuery, String> {
    let q = match v {
        Value::Null => InfoQuery::ListResources,
        Value::String(s) => parse_query_str(s)?,
        Value::Object(map) => {
            let mut map = map.clone();
            if !map.contains_key("type") {
                if let Some(kind) = map.remove("kind") {
                    map.insert("type".into(), kind);
                }
            }
            serde_json::from_value(Value::Object(map)).map_err(|e| format!("invalid info query: {e}"))?
        }
        other => return Err(format!("invalid info query {other}")),
    };
    Ok(q.capped())
}

fn parse_query_str(s: &str) -> Result<InfoQuery, String> {
    let words: Vec<&str> = s.split_whitespace().collect();
    let count = |w: Option<&&str>, default: usize| -> Result<usize, String> {
        w.map(|w| w.parse::<usize>().map_err(|_| format!("`{w}` is not a count"))).unwrap_or(Ok(default))
    };
    match words.as_slice() {
        [] | ["list_resources"] => Ok(InfoQuery::ListResources),
        ["table_schema", table] => Ok(InfoQuery::TableSchema { table: table.to_string() }),
        ["sample_rows", table, rest @ ..] => {
            Ok(InfoQuery::SampleRows { table: table.to_string(), n: count(rest.first(), 5)? })
        }
        ["file_head", name, rest @ ..] => {
            Ok(InfoQuery::FileHead { name: name.to_string(), n_lines: count(rest.first(), 10)? })
        }
        _ => Err(format!(
            "unrecognized info query `{s}`; use list_resources, table_schema <table>, sample_rows <table> <n> or file_head <file> <n>"
        )),
    }
}

/// Candidate JSON object texts: the whole reply, then every balanced
/// top-level `{...}` span in order of appearance.
fn json_candidates(text: &str) -> Vec<String> {
    let mut out = vec![text.trim().to_string()];
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            if let Some(end) = matching_brace(bytes, i) {
                out.push(text[i..=end].to_string());
                i = end + 1;
                continue;
            }
        }
        i += 1;
    }
    out
}

fn matching_brace(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (j, &b) in bytes.iter().enumerate().skip(start) {
        if in_str {
            match (escaped, b) {
                (true, _) => escaped = false,
                (false, b'\\') => escaped = true,
                (false, b'"') => in_str = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(j);
                }
            }
            _ => {}
        }
    }
    None
}

/// Body of the last fenced code block, ignoring `json` fences.
pub fn last_code_fence(text: &str) -> Option<String> {
    fences(text).into_iter().rfind(|(lang, _)| !lang.eq_ignore_ascii_case("json")).map(|(_, body)| body)
}

/// Whether the text contains at least one complete fenced code block.
pub fn has_code_fence(text: &str) -> bool {
    !fences(text).is_empty()
}

fn fences(text: &str) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut lines = text.lines();
    while let Some(line) = lines.next() {
        let Some(rest) = line.trim_start().strip_prefix("```") else {
            continue;
        };
        let lang = rest.trim().to_string();
        let mut body = Vec::new();
        let mut closed = false;
        for inner in lines.by_ref() {
            if inner.trim_start().starts_with("```") {
                closed = true;
                break;
            }
            body.push(inner);
        }
        if closed {
            out.push((lang, body.join("\n")));
        }
    }
    out
}
