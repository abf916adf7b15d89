//! Task suites: manifests, info queries and answer verification.

mod info;
mod verify;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{validate_task_spec, Budget, GroundTruth, Resource, TaskSpec, ValidationError};
use crate::protocol::prompt::{render_task_prompt, task_vars, PromptError, PromptTemplate};
use crate::sandbox::{CaptureMode, SandboxConfig};

pub use info::{answer_info, InfoError};
pub use verify::{
    canonical_cell, canonical_text, parse_answer_rows, reference_rows, score_predictions, verify_exact,
    verify_output_signature, verify_result_set, VerifyError,
};

/// Where workspace code sees the task data, relative to its working directory.
pub const DATA_DIRECTORY: &str = "../data";

pub const SUITES_DIR_ENV: &str = "GYM_SUITES_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerificationMode {
    /// ValueExact or Numeric ground truth.
    Exact,
    ResultSet,
    OutputSignature,
    LabelFile,
}

impl VerificationMode {
    pub fn accepts(&self, gt: &GroundTruth) -> bool {
        matches!(
            (self, gt),
            (VerificationMode::Exact, GroundTruth::ValueExact { .. } | GroundTruth::Numeric { .. })
                | (VerificationMode::ResultSet, GroundTruth::ResultSet { .. })
                | (VerificationMode::OutputSignature, GroundTruth::OutputSignature { .. })
                | (VerificationMode::LabelFile, GroundTruth::LabelFile { .. })
        )
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            VerificationMode::Exact => "exact",
            VerificationMode::ResultSet => "result_set",
            VerificationMode::OutputSignature => "output_signature",
            VerificationMode::LabelFile => "label_file",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delimiter {
    #[default]
    Auto,
    Tab,
    Comma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationConfig {
    pub mode: VerificationMode,
    #[serde(default = "default_threshold")]
    pub success_threshold: f64,
    /// Resource holding the database for result-set tasks; defaults to the
    /// task's first `.db`/`.sqlite` resource.
    #[serde(default)]
    pub db_resource: Option<String>,
    #[serde(default)]
    pub delimiter: Delimiter,
    #[serde(default)]
    pub case_insensitive: bool,
    #[serde(default = "default_prediction_column")]
    pub prediction_column: String,
}

fn default_threshold() -> f64 {
    1.0
}

fn default_prediction_column() -> String {
    "prediction".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InfoConfig {
    /// Upper bound on the size of any info answer, in characters.
    pub max_chars: usize,
}

impl Default for InfoConfig {
    fn default() -> Self {
        InfoConfig { max_chars: 8000 }
    }
}

/// Per-suite budget overrides; unset fields keep the run's budget.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetOverrides {
    pub max_turns: Option<u32>,
    pub max_wall_s: Option<f64>,
    pub max_exec_s: Option<f64>,
    pub max_input_tokens: Option<usize>,
    pub max_output_tokens: Option<usize>,
}

impl BudgetOverrides {
    pub fn apply(&self, base: &Budget) -> Budget {
        Budget {
            max_turns: self.max_turns.unwrap_or(base.max_turns),
            max_wall_s: self.max_wall_s.unwrap_or(base.max_wall_s),
            max_exec_s: self.max_exec_s.unwrap_or(base.max_exec_s),
            max_input_tokens: self.max_input_tokens.unwrap_or(base.max_input_tokens),
            max_output_tokens: self.max_output_tokens.unwrap_or(base.max_output_tokens),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteDescriptor {
    pub suite_id: String,
    pub verification: VerificationConfig,
    pub prompt_templates: BTreeMap<String, PromptTemplate>,
    pub info: InfoConfig,
    pub limits: BudgetOverrides,
    pub allow_install: bool,
    pub capture_mode: CaptureMode,
    pub interpreter_cmd: Option<String>,
    pub harness_cmd: Option<String>,
    pub manifest_path: PathBuf,
}

impl SuiteDescriptor {
    pub fn mode(&self) -> VerificationMode {
        self.verification.mode
    }

    pub fn sandbox_config(&self) -> SandboxConfig {
        let mut cfg = SandboxConfig { allow_install: self.allow_install, ..SandboxConfig::default() };
        if let Some(cmd) = &self.interpreter_cmd {
            cfg.interpreter_cmd = cmd.clone();
        }
        cfg.harness_cmd = self.harness_cmd.clone();
        cfg
    }

    pub fn template(&self, id: &str) -> Option<&PromptTemplate> {
        self.prompt_templates.get(id)
    }
}

#[derive(Debug, Clone)]
pub struct Suite {
    pub descriptor: SuiteDescriptor,
    pub tasks: Vec<TaskSpec>,
}

impl Suite {
    pub fn id(&self) -> &str {
        &self.descriptor.suite_id
    }

    pub fn task(&self, task_id: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    /// The rendered initial prompt of a task.
    pub fn task_prompt(&self, task: &TaskSpec) -> Result<String, PromptError> {
        let template = self
            .descriptor
            .template(&task.prompt_template_id)
            .ok_or_else(|| PromptError::UnresolvedPlaceholder(format!("template:{}", task.prompt_template_id)))?;
        render_task_prompt(template, &task_vars(task, DATA_DIRECTORY))
    }
}

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error("cannot read manifest {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid manifest {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("task #{index}: {source}")]
    Task { index: usize, source: ValidationError },
    #[error("duplicate task_id `{0}`")]
    DuplicateTaskId(String),
    #[error("suite `{0}` has no tasks")]
    EmptySuite(String),
    #[error("task `{task_id}` has {variant} ground truth but suite mode is {mode}")]
    ModeMismatch { task_id: String, mode: &'static str, variant: &'static str },
    #[error("task `{task_id}` uses unknown prompt template `{template_id}`")]
    UnknownTemplate { task_id: String, template_id: String },
    #[error("task `{task_id}`: {source}")]
    Template { task_id: String, source: PromptError },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    suite_id: String,
    verification: VerificationConfig,
    #[serde(default)]
    prompt_templates: BTreeMap<String, PromptTemplate>,
    #[serde(default)]
    info: InfoConfig,
    #[serde(default)]
    limits: BudgetOverrides,
    #[serde(default)]
    allow_install: bool,
    #[serde(default)]
    capture_mode: CaptureMode,
    #[serde(default)]
    interpreter_cmd: Option<String>,
    #[serde(default)]
    harness_cmd: Option<String>,
    #[serde(default)]
    tasks: Option<Vec<Value>>,
    /// Alternative to `tasks`: a JSON-lines file of task objects.
    #[serde(default)]
    tasks_file: Option<PathBuf>,
}

pub const DEFAULT_TEMPLATE_TEXT: &str =
    "Solve the following task. Any data files are available in the directory {data_directory}.";

/// Loads and validates a suite manifest. Resource paths are relative to the
/// manifest's directory.
pub fn load_suite(manifest_path: &Path) -> Result<Suite, SuiteError> {
    let text =
        fs::read_to_string(manifest_path).map_err(|source| SuiteError::Read { path: manifest_path.into(), source })?;
    let parse_err = |message: String| SuiteError::Parse { path: manifest_path.into(), message };
    let raw: RawManifest = serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
    let base_dir = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();

    if raw.suite_id.trim().is_empty() {
        return Err(parse_err("suite_id must be non-empty".into()));
    }
    let t = raw.verification.success_threshold;
    if !(0.0..=1.0).contains(&t) {
        return Err(parse_err(format!("verification.success_threshold must be in [0, 1], got {t}")));
    }

    let mut templates = raw.prompt_templates;
    for (id, tpl) in templates.iter_mut() {
        if tpl.template_id.is_empty() {
            tpl.template_id = id.clone();
        }
        tpl.validate().map_err(|e| parse_err(e.to_string()))?;
    }
    templates.entry("default".into()).or_insert_with(|| PromptTemplate::new("default", DEFAULT_TEMPLATE_TEXT));

    let raw_tasks: Vec<Value> = match (raw.tasks, raw.tasks_file) {
        (Some(_), Some(_)) => return Err(parse_err("give either tasks or tasks_file, not both".into())),
        (Some(t), None) => t,
        (None, Some(file)) => {
            let path = base_dir.join(file);
            let body = fs::read_to_string(&path).map_err(|source| SuiteError::Read { path: path.clone(), source })?;
            body.lines()
                .filter(|l| !l.trim().is_empty())
                .enumerate()
                .map(|(i, l)| serde_json::from_str(l).map_err(|e| parse_err(format!("{}: line {}: {e}", path.display(), i + 1))))
                .collect::<Result<_, _>>()?
        }
        (None, None) => Vec::new(),
    };
    if raw_tasks.is_empty() {
        return Err(SuiteError::EmptySuite(raw.suite_id));
    }

    let descriptor = SuiteDescriptor {
        suite_id: raw.suite_id,
        verification: raw.verification,
        prompt_templates: templates,
        info: raw.info,
        limits: raw.limits,
        allow_install: raw.allow_install,
        capture_mode: raw.capture_mode,
        interpreter_cmd: raw.interpreter_cmd,
        harness_cmd: raw.harness_cmd,
        manifest_path: manifest_path.to_path_buf(),
    };

    let mut seen = BTreeSet::new();
    let mut tasks = Vec::with_capacity(raw_tasks.len());
    for (index, raw_task) in raw_tasks.iter().enumerate() {
        let task = validate_task_spec(raw_task, &descriptor.suite_id, &base_dir)
            .map_err(|source| SuiteError::Task { index, source })?;
        if !seen.insert(task.task_id.clone()) {
            return Err(SuiteError::DuplicateTaskId(task.task_id));
        }
        if !descriptor.mode().accepts(&task.ground_truth) {
            return Err(SuiteError::ModeMismatch {
                task_id: task.task_id,
                mode: descriptor.mode().as_str(),
                variant: task.ground_truth.variant_name(),
            });
        }
        let Some(template) = descriptor.template(&task.prompt_template_id) else {
            return Err(SuiteError::UnknownTemplate { task_id: task.task_id, template_id: task.prompt_template_id });
        };
        render_task_prompt(template, &task_vars(&task, DATA_DIRECTORY))
            .map_err(|source| SuiteError::Template { task_id: task.task_id.clone(), source })?;
        tasks.push(task);
    }
    Ok(Suite { descriptor, tasks })
}

/// The database a result-set task is checked against: the configured
/// resource, else the first sqlite resource.
pub fn db_resource<'a>(task: &'a TaskSpec, config: &VerificationConfig) -> Option<&'a Resource> {
    match &config.db_resource {
        Some(name) => task.resource(name),
        None => task.resources.iter().find(|r| info::is_sqlite(r)),
    }
}

/// Directory holding the bundled mini-suites.
pub fn bundled_suites_dir() -> PathBuf {
    match std::env::var_os(SUITES_DIR_ENV) {
        Some(dir) => PathBuf::from(dir),
        None => PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("suites"),
    }
}

/// Manifests of the bundled suites, sorted by path.
pub fn bundled_manifests() -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = fs::read_dir(bundled_suites_dir())
        .map(|rd| rd.filter_map(|e| e.ok()).map(|e| e.path().join("manifest.json")).filter(|p| p.is_file()).collect())
        .unwrap_or_default();
    out.sort();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn write_manifest(dir: &Path, v: &Value) -> PathBuf {
        let p = dir.join("manifest.json");
        fs::write(&p, serde_json::to_string(v).unwrap()).unwrap();
        p
    }

    fn task(id: &str) -> Value {
        json!({"task_id": id, "problem": "p", "ground_truth": {"type": "value_exact", "value": "1"}})
    }

    #[test]
    fn duplicate_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(
            dir.path(),
            &json!({"suite_id": "s", "verification": {"mode": "exact"}, "tasks": [task("a"), task("a")]}),
        );
        assert!(matches!(load_suite(&p), Err(SuiteError::DuplicateTaskId(id)) if id == "a"));
        let p = write_manifest(dir.path(), &json!({"suite_id": "s", "verification": {"mode": "exact"}, "tasks": []}));
        assert!(matches!(load_suite(&p), Err(SuiteError::EmptySuite(_))));
    }

    #[test]
    fn task_errors_carry_index() {
        let dir = tempfile::tempdir().unwrap();
        let bad = json!({"task_id": "b", "problem": "p"});
        let p = write_manifest(
            dir.path(),
            &json!({"suite_id": "s", "verification": {"mode": "exact"}, "tasks": [task("a"), bad]}),
        );
        match load_suite(&p) {
            Err(SuiteError::Task { index: 1, source: ValidationError::MissingField(f) }) => assert_eq!(f, "ground_truth"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mode_must_match() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(
            dir.path(),
            &json!({"suite_id": "s", "verification": {"mode": "result_set"}, "tasks": [task("a")]}),
        );
        assert!(matches!(load_suite(&p), Err(SuiteError::ModeMismatch { .. })));
    }

    #[test]
    fn unresolvable_template_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(
            dir.path(),
            &json!({"suite_id": "s", "verification": {"mode": "exact"},
                    "prompt_templates": {"default": {"system_text": "see {fhir_api_base}"}},
                    "tasks": [task("a")]}),
        );
        assert!(matches!(load_suite(&p), Err(SuiteError::Template { .. })));
    }

    #[test]
    fn tasks_file_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let lines = format!("{}\n{}\n", task("a"), task("b"));
        fs::write(dir.path().join("tasks.jsonl"), lines).unwrap();
        let p = write_manifest(
            dir.path(),
            &json!({"suite_id": "s", "verification": {"mode": "exact"}, "tasks_file": "tasks.jsonl",
                    "limits": {"max_turns": 5}}),
        );
        let suite = load_suite(&p).unwrap();
        assert_eq!(suite.tasks.len(), 2);
        assert_eq!(suite.descriptor.limits.apply(&Budget::default()).max_turns, 5);
        let prompt = suite.task_prompt(&suite.tasks[0]).unwrap();
        assert!(prompt.contains(DATA_DIRECTORY) && prompt.ends_with("Question: p"));
    }
}
