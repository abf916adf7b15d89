//! Task instances and their ground truth.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// A data file made available to the agent inside its workspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resource {
    pub name: String,
    pub path: PathBuf,
    #[serde(default = "default_true")]
    pub read_only: bool,
}

fn default_true() -> bool {
    true
}

/// Reference outcome a submitted answer is checked against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GroundTruth {
    ValueExact {
        value: String,
    },
    Numeric {
        value: f64,
        #[serde(default)]
        abs_tol: f64,
        #[serde(default)]
        rel_tol: f64,
    },
    ResultSet {
        gold_query: String,
    },
    OutputSignature {
        test_inputs: Vec<String>,
        expected_outputs: Vec<String>,
    },
    LabelFile {
        path: PathBuf,
        id_column: String,
        label_column: String,
    },
}

impl GroundTruth {
    pub fn variant_name(&self) -> &'static str {
        match self {
            GroundTruth::ValueExact { .. } => "value_exact",
            GroundTruth::Numeric { .. } => "numeric",
            GroundTruth::ResultSet { .. } => "result_set",
            GroundTruth::OutputSignature { .. } => "output_signature",
            GroundTruth::LabelFile { .. } => "label_file",
        }
    }
}

/// One verifiable instance: a problem, its ground truth and optional data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub suite_id: String,
    pub problem: String,
    pub ground_truth: GroundTruth,
    #[serde(default)]
    pub resources: Vec<Resource>,
    pub prompt_template_id: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl TaskSpec {
    pub fn resource(&self, name: &str) -> Option<&Resource> {
        self.resources.iter().find(|r| r.name == name)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ValidationError {
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("field `{key}` is invalid: {reason}")]
    InvalidField { key: String, reason: String },
    #[error("unknown ground truth variant `{0}`")]
    UnknownGroundTruthVariant(String),
    #[error("tolerance `{key}` must be a finite value >= 0, got {value}")]
    InvalidTolerance { key: String, value: f64 },
    #[error("resource `{key}` not found at {}", path.display())]
    ResourceNotFound { key: String, path: PathBuf },
}

fn require_str(obj: &serde_json::Map<String, Value>, key: &str, prefix: &str) -> Result<String, ValidationError> {
    let full = if prefix.is_empty() { key.to_string() } else { format!("{prefix}.{key}") };
    match obj.get(key) {
        None | Some(Value::Null) => Err(ValidationError::MissingField(full)),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(other) => Err(ValidationError::InvalidField { key: full, reason: format!("expected string, got {other}") }),
    }
}

fn optional_tol(obj: &serde_json::Map<String, Value>, key: &str) -> Result<f64, ValidationError> {
    let full = format!("ground_truth.{key}");
    match obj.get(key) {
        None | Some(Value::Null) => Ok(0.0),
        Some(v) => {
            let x = v
                .as_f64()
                .ok_or_else(|| ValidationError::InvalidField { key: full.clone(), reason: "expected number".into() })?;
            if !x.is_finite() || x < 0.0 {
                return Err(ValidationError::InvalidTolerance { key: full, value: x });
            }
            Ok(x)
        }
    }
}

fn string_list(obj: &serde_json::Map<String, Value>, key: &str) -> Result<Vec<String>, ValidationError> {
    let full = format!("ground_truth.{key}");
    let arr = obj
        .get(key)
        .ok_or_else(|| ValidationError::MissingField(full.clone()))?
        .as_array()
        .ok_or_else(|| ValidationError::InvalidField { key: full.clone(), reason: "expected array".into() })?;
    arr.iter()
        .map(|v| match v {
            Value::String(s) => Ok(s.clone()),
            // Structured inputs are kept as their JSON text.
            other => Ok(other.to_string()),
        })
        .collect()
}

fn resolve(base_dir: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

fn parse_ground_truth(raw: &Value, base_dir: &Path) -> Result<GroundTruth, ValidationError> {
    let obj = raw.as_object().ok_or_else(|| ValidationError::InvalidField {
        key: "ground_truth".into(),
        reason: "expected object".into(),
    })?;
    let kind = require_str(obj, "type", "ground_truth")?;
    match kind.as_str() {
        "value_exact" => {
            let value = match obj.get("value") {
                None | Some(Value::Null) => return Err(ValidationError::MissingField("ground_truth.value".into())),
                Some(Value::String(s)) => s.clone(),
                Some(other) => other.to_string(),
            };
            Ok(GroundTruth::ValueExact { value })
        }
        "numeric" => {
            let value = obj
                .get("value")
                .ok_or_else(|| ValidationError::MissingField("ground_truth.value".into()))?;
            let value = match value {
                Value::Number(n) => n.as_f64(),
                Value::String(s) => s.trim().parse::<f64>().ok(),
                _ => None,
            }
            .filter(|v| v.is_finite())
            .ok_or_else(|| ValidationError::InvalidField {
                key: "ground_truth.value".into(),
                reason: "expected a finite number".into(),
            })?;
            let abs_tol = optional_tol(obj, "abs_tol")?;
            let rel_tol = optional_tol(obj, "rel_tol")?;
            Ok(GroundTruth::Numeric { value, abs_tol, rel_tol })
        }
        "result_set" => Ok(GroundTruth::ResultSet { gold_query: require_str(obj, "gold_query", "ground_truth")? }),
        "output_signature" => {
            let test_inputs = string_list(obj, "test_inputs")?;
            let expected_outputs = string_list(obj, "expected_outputs")?;
            if test_inputs.is_empty() || test_inputs.len() != expected_outputs.len() {
                return Err(ValidationError::InvalidField {
                    key: "ground_truth.expected_outputs".into(),
                    reason: format!(
                        "need equal, non-empty input/output lists (got {} inputs, {} outputs)",
                        test_inputs.len(),
                        expected_outputs.len()
                    ),
                });
            }
            Ok(GroundTruth::OutputSignature { test_inputs, expected_outputs })
        }
        "label_file" => {
            let path = resolve(base_dir, &require_str(obj, "path", "ground_truth")?);
            if !path.exists() {
                return Err(ValidationError::ResourceNotFound { key: "ground_truth.path".into(), path });
            }
            Ok(GroundTruth::LabelFile {
                path,
                id_column: require_str(obj, "id_column", "ground_truth")?,
                label_column: require_str(obj, "label_column", "ground_truth")?,
            })
        }
        other => Err(ValidationError::UnknownGroundTruthVariant(other.to_string())),
    }
}

/// Validates one raw manifest task entry. Relative resource paths are
/// resolved against `base_dir` and must exist.
pub fn validate_task_spec(raw: &Value, suite_id: &str, base_dir: &Path) -> Result<TaskSpec, ValidationError> {
    let obj = raw.as_object().ok_or_else(|| ValidationError::InvalidField {
        key: "task".into(),
        reason: "expected object".into(),
    })?;
    let task_id = require_str(obj, "task_id", "")?;
    if task_id.trim().is_empty() {
        return Err(ValidationError::InvalidField { key: "task_id".into(), reason: "must be non-empty".into() });
    }
    let problem = require_str(obj, "problem", "")?;
    let ground_truth = parse_ground_truth(
        obj.get("ground_truth").ok_or_else(|| ValidationError::MissingField("ground_truth".into()))?,
        base_dir,
    )?;
    let prompt_template_id = match obj.get("prompt_template_id") {
        None | Some(Value::Null) => "default".to_string(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => {
            return Err(ValidationError::InvalidField { key: "prompt_template_id".into(), reason: "expected string".into() })
        }
    };

    let mut resources = Vec::new();
    if let Some(list) = obj.get("resources") {
        let list = list
            .as_array()
            .ok_or_else(|| ValidationError::InvalidField { key: "resources".into(), reason: "expected array".into() })?;
        for (i, item) in list.iter().enumerate() {
            let prefix = format!("resources[{i}]");
            let r = item.as_object().ok_or_else(|| ValidationError::InvalidField {
                key: prefix.clone(),
                reason: "expected object".into(),
            })?;
            let path_str = require_str(r, "path", &prefix)?;
            let path = resolve(base_dir, &path_str);
            if !path.exists() {
                return Err(ValidationError::ResourceNotFound { key: format!("{prefix}.path"), path });
            }
            let name = match r.get("name") {
                Some(Value::String(s)) => s.clone(),
                _ => path
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .ok_or_else(|| ValidationError::MissingField(format!("{prefix}.name")))?,
            };
            if name.contains('/') || name == ".." || name == "." || name.is_empty() {
                return Err(ValidationError::InvalidField {
                    key: format!("{prefix}.name"),
                    reason: "must be a plain file name".into(),
                });
            }
            let read_only = r.get("read_only").and_then(Value::as_bool).unwrap_or(true);
            resources.push(Resource { name, path, read_only });
        }
    }

    let mut metadata = BTreeMap::new();
    if let Some(meta) = obj.get("metadata") {
        let meta = meta
            .as_object()
            .ok_or_else(|| ValidationError::InvalidField { key: "metadata".into(), reason: "expected object".into() })?;
        for (k, v) in meta {
            let v = match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            metadata.insert(k.clone(), v);
        }
    }

    Ok(TaskSpec {
        task_id,
        suite_id: suite_id.to_string(),
        problem,
        ground_truth,
        resources,
        prompt_template_id,
        metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn minimal_value_exact_task_is_valid() {
        let raw = json!({"task_id": "t1", "problem": "2+2?", "ground_truth": {"type": "value_exact", "value": "4"}});
        let t = validate_task_spec(&raw, "calc", Path::new(".")).unwrap();
        assert_eq!(t.ground_truth, GroundTruth::ValueExact { value: "4".into() });
        assert!(t.resources.is_empty());
        assert_eq!(t.suite_id, "calc");
    }

    #[test]
    fn negative_tolerance_is_rejected() {
        let raw = json!({"task_id": "t1", "problem": "p",
            "ground_truth": {"type": "numeric", "value": 1.0, "abs_tol": -0.1}});
        let err = validate_task_spec(&raw, "s", Path::new(".")).unwrap_err();
        assert!(matches!(err, ValidationError::InvalidTolerance { ref key, .. } if key == "ground_truth.abs_tol"));
    }

    #[test]
    fn missing_resource_names_the_key() {
        let raw = json!({"task_id": "t1", "problem": "p",
            "ground_truth": {"type": "value_exact", "value": "1"},
            "resources": [{"name": "d", "path": "/definitely/not/here"}]});
        let err = validate_task_spec(&raw, "s", Path::new(".")).unwrap_err();
        assert!(matches!(err, ValidationError::ResourceNotFound { ref key, .. } if key == "resources[0].path"));
    }

    #[test]
    fn missing_and_unknown_fields() {
        let raw = json!({"problem": "p", "ground_truth": {"type": "value_exact", "value": "1"}});
        assert_eq!(
            validate_task_spec(&raw, "s", Path::new(".")).unwrap_err(),
            ValidationError::MissingField("task_id".into())
        );
        let raw = json!({"task_id": "a", "problem": "p", "ground_truth": {"type": "fhir"}});
        assert_eq!(
            validate_task_spec(&raw, "s", Path::new(".")).unwrap_err(),
            ValidationError::UnknownGroundTruthVariant("fhir".into())
        );
    }

    #[test]
    fn output_signature_lists_must_match() {
        let raw = json!({"task_id": "a", "problem": "p",
            "ground_truth": {"type": "output_signature", "test_inputs": ["[1]"], "expected_outputs": []}});
        assert!(matches!(
            validate_task_spec(&raw, "s", Path::new(".")).unwrap_err(),
            ValidationError::InvalidField { .. }
        ));
    }
}
