//! Turning failed executions into short natural-language feedback.

use serde::{Deserialize, Serialize};

use crate::model::{ExecutionResult, ExitStatus};

pub const HEADLINE_MAX: usize = 200;
const EXCERPT_LINES: usize = 15;
const EXCERPT_CHARS: usize = 1500;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundedError {
    pub headline: String,
    pub error_class: String,
    pub location_hint: Option<String>,
    pub excerpt: String,
}

impl GroundedError {
    /// Text shown to the agent.
    pub fn render(&self) -> String {
        let mut out = format!("Execution failed ({}): {}", self.error_class, self.headline);
        if let Some(loc) = &self.location_hint {
            out.push_str(&format!("\nLocation: {loc}"));
        }
        if !self.excerpt.is_empty() {
            out.push_str("\nError output (tail):\n");
            out.push_str(&self.excerpt);
        }
        out
    }
}

/// Backend producing grounded errors; swap in a model-backed one if desired.
pub trait ErrorGrounder: Send + Sync {
    fn ground(&self, exec: &ExecutionResult) -> GroundedError;
}

/// Deterministic extraction from stderr.
#[derive(Debug, Default, Clone, Copy)]
pub struct RuleGrounder;

impl ErrorGrounder for RuleGrounder {
    fn ground(&self, exec: &ExecutionResult) -> GroundedError {
        ground_error(exec)
    }
}

pub fn ground_error(exec: &ExecutionResult) -> GroundedError {
    let excerpt = tail_excerpt(&exec.stderr);
    let location_hint = last_location(&exec.stderr);
    if exec.timed_out {
        let secs = exec.limit_ms as f64 / 1000.0;
        return GroundedError {
            headline: clip(&format!(
                "execution exceeded the time limit of {secs} s and was terminated; check for infinite loops or very slow operations"
            )),
            error_class: "Timeout".into(),
            location_hint,
            excerpt,
        };
    }
    if let Some((class, message)) = final_error_line(&exec.stderr) {
        let headline = if message.is_empty() { class.clone() } else { format!("{class}: {message}") };
        return GroundedError { headline: clip(&headline), error_class: class, location_hint, excerpt };
    }
    if let Some(last) = exec.stderr.lines().map(str::trim).rfind(|l| !l.is_empty()) {
        return GroundedError { headline: clip(last), error_class: "Error".into(), location_hint, excerpt };
    }
    let headline = match exec.exit_status {
        ExitStatus::Code(c) => format!("process exited with status {c}"),
        ExitStatus::Signal(s) => format!("process was terminated by signal {s}"),
    };
    GroundedError { headline, error_class: "ExitStatus".into(), location_hint, excerpt }
}

fn clip(s: &str) -> String {
    if s.chars().count() <= HEADLINE_MAX {
        return s.to_string();
    }
    let mut out: String = s.chars().take(HEADLINE_MAX - 3).collect();
    out.push_str("...");
    out
}

fn is_ident(s: &str) -> bool {
    !s.is_empty()
        && s.split('.').all(|part| {
            let mut chars = part.chars();
            matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
                && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
        })
}

/// Finds the last `ErrorClass: message` line (Python traceback convention).
fn final_error_line(stderr: &str) -> Option<(String, String)> {
    for line in stderr.lines().rev() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("[sandbox]") {
            continue;
        }
        let (head, msg) = match line.split_once(':') {
            Some((h, m)) => (h.trim(), m.trim()),
            None => (line, ""),
        };
        let short = head.rsplit('.').next().unwrap_or(head);
        let looks_like_class = is_ident(head)
            && (short.ends_with("Error")
                || short.ends_with("Exception")
                || short.ends_with("Exit")
                || short.ends_with("Interrupt")
                || short.ends_with("Warning")
                || short == "StopIteration");
        if looks_like_class {
            return Some((short.to_string(), msg.to_string()));
        }
    }
    None
}

fn last_location(stderr: &str) -> Option<String> {
    let lines: Vec<&str> = stderr.lines().collect();
    for (i, line) in lines.iter().enumerate().rev() {
        let t = line.trim();
        let Some(rest) = t.strip_prefix("File \"") else {
            continue;
        };
        let (file, rest) = rest.split_once('"')?;
        let line_no = rest.split("line ").nth(1).map(|s| s.split(|c: char| !c.is_ascii_digit()).next().unwrap_or(""));
        let mut hint = match line_no {
            Some(n) if !n.is_empty() => format!("{file}, line {n}"),
            _ => file.to_string(),
        };
        if let Some(src) = lines.get(i + 1).map(|l| l.trim()) {
            if !src.is_empty() && !src.starts_with("File \"") && final_error_line(src).is_none() && !src.starts_with('^') {
                hint.push_str(&format!(": `{src}`"));
            }
        }
        return Some(hint);
    }
    None
}

fn tail_excerpt(stderr: &str) -> String {
    let lines: Vec<&str> = stderr.lines().collect();
    let start = lines.len().saturating_sub(EXCERPT_LINES);
    let text = lines[start..].join("\n");
    let n = text.chars().count();
    if n <= EXCERPT_CHARS {
        text
    } else {
        text.chars().skip(n - EXCERPT_CHARS).collect()
    }
}
