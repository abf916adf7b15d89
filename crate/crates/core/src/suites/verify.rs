//! Answer verification for each verification mode.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use thiserror::Error;

use crate::model::{GroundTruth, Verdict};
use crate::sandbox::{CaptureMode, SandboxError, Workspace};

use super::info::{open_read_only, render_value};
use super::{Delimiter, VerificationConfig};

#[derive(Debug, Error)]
pub enum VerifyError {
    /// The suite's own reference query failed; a suite defect.
    #[error("gold query failed: {message} (query: {query})")]
    GoldQueryFailed { query: String, message: String },
    #[error("malformed prediction file: {0}")]
    MalformedPredictionFile(String),
    #[error("invalid gold labels {path}: {message}")]
    GoldLabels { path: String, message: String },
    #[error("ground truth of type {0} cannot be checked this way")]
    WrongGroundTruth(&'static str),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
}

/// Trims and collapses internal whitespace runs to one space.
pub fn canonical_text(s: &str, case_insensitive: bool) -> String {
    let joined = s.split_whitespace().collect::<Vec<_>>().join(" ");
    if case_insensitive {
        joined.to_lowercase()
    } else {
        joined
    }
}

fn parse_number(s: &str) -> Option<f64> {
    let s = s.trim();
    if !s.bytes().any(|b| b.is_ascii_digit()) || !s.bytes().all(|b| b.is_ascii_digit() || b"+-.eE".contains(&b)) {
        return None;
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn canonical_number(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Canonical form of one result cell: whitespace-normalized text, numbers
/// in a single numeric spelling and null spellings unified.
pub fn canonical_cell(s: &str, case_insensitive: bool) -> String {
    let t = canonical_text(s, false);
    if t.is_empty() || ["none", "null", "nan"].contains(&t.to_ascii_lowercase().as_str()) {
        return "NULL".into();
    }
    if let Some(v) = parse_number(&t) {
        return canonical_number(v);
    }
    if case_insensitive {
        t.to_lowercase()
    } else {
        t
    }
}

/// Exact-match check against ValueExact or Numeric ground truth.
pub fn verify_exact(answer: &str, gold: &GroundTruth, case_insensitive: bool) -> Verdict {
    let got = canonical_text(answer, case_insensitive);
    match gold {
        GroundTruth::ValueExact { value } => {
            let want = canonical_text(value, case_insensitive);
            let ok = match (parse_number(&got), parse_number(&want)) {
                (Some(a), Some(b)) => a == b,
                _ => got == want,
            };
            Verdict::exact(ok, if ok { "exact match".to_string() } else { format!("expected {want:?}, got {got:?}") })
        }
        GroundTruth::Numeric { value, abs_tol, rel_tol } => match parse_number(&got) {
            Some(a) => {
                let tol = abs_tol.max(rel_tol * value.abs());
                let ok = (a - value).abs() <= tol;
                Verdict::exact(
                    ok,
                    if ok { "numeric match".to_string() } else { format!("expected {value} (tolerance {tol}), got {a}") },
                )
            }
            None => Verdict::failure(format!("expected a number, got {got:?}")),
        },
        other => Verdict::failure(format!("{} ground truth is not checked by exact match", other.variant_name())),
    }
}

fn split_row(line: &str, delimiter: Delimiter) -> Vec<String> {
    match delimiter {
        Delimiter::Tab => line.split('\t').map(str::to_string).collect(),
        Delimiter::Comma => line.split(',').map(str::to_string).collect(),
        Delimiter::Auto => {
            if line.contains('\t') {
                return line.split('\t').map(str::to_string).collect();
            }
            // tuple or list reprs such as (1, 'a') or [1, 'a']
            let bracketed = (line.starts_with('(') && line.ends_with(')')) || (line.starts_with('[') && line.ends_with(']'));
            if bracketed && line.len() >= 2 {
                return line[1..line.len() - 1]
                    .split(',')
                    .map(|c| c.trim())
                    .filter(|c| !c.is_empty())
                    .map(|c| c.trim_matches(|q| q == '\'' || q == '"').to_string())
                    .collect();
            }
            if line.contains(',') {
                line.split(',').map(str::to_string).collect()
            } else {
                vec![line.to_string()]
            }
        }
    }
}

/// Splits an answer into rows (one per non-empty line) and cells.
pub fn parse_answer_rows(answer: &str, delimiter: Delimiter) -> Vec<Vec<String>> {
    answer.lines().map(str::trim).filter(|l| !l.is_empty()).map(|l| split_row(l, delimiter)).collect()
}

/// Rows produced by the gold query, rendered as text cells.
pub fn reference_rows(gold_query: &str, db_path: &Path) -> Result<Vec<Vec<String>>, VerifyError> {
    let fail = |e: rusqlite::Error| VerifyError::GoldQueryFailed { query: gold_query.into(), message: e.to_string() };
    let conn = open_read_only(db_path).map_err(fail)?;
    let mut stmt = conn.prepare(gold_query).map_err(fail)?;
    let ncols = stmt.column_count();
    let mut rows = stmt.query([]).map_err(fail)?;
    let mut out = Vec::new();
    while let Some(row) = rows.next().map_err(fail)? {
        let mut cells = Vec::with_capacity(ncols);
        for i in 0..ncols {
            cells.push(render_value(row.get_ref(i).map_err(fail)?));
        }
        out.push(cells);
    }
    Ok(out)
}

fn canonical_rows(rows: &[Vec<String>], ci: bool) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = rows.iter().map(|r| r.iter().map(|c| canonical_cell(c, ci)).collect()).collect();
    out.sort();
    out
}

/// Compares answer rows with the gold query's rows as multisets.
pub fn verify_result_set(
    answer: &str,
    gold_query: &str,
    db_path: &Path,
    config: &VerificationConfig,
) -> Result<Verdict, VerifyError> {
    let ci = config.case_insensitive;
    let want = canonical_rows(&reference_rows(gold_query, db_path)?, ci);
    let got = canonical_rows(&parse_answer_rows(answer, config.delimiter), ci);
    if want == got {
        return Ok(Verdict::exact(true, format!("{} row(s) match", want.len())));
    }
    let detail = if want.len() != got.len() {
        format!("expected {} row(s), got {}", want.len(), got.len())
    } else {
        let missing = want.iter().find(|r| !got.contains(r)).map(|r| r.join("\t")).unwrap_or_default();
        format!("row multisets differ; expected row {missing:?} not found")
    };
    Ok(Verdict::exact(false, detail))
}

const RESULT_SENTINEL: &str = "__gym_result__";

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_') && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn driver(code: &str, entry_point: &str, input: &str) -> String {
    let literal = serde_json::to_string(input).expect("string serializes");
    format!(
        "{code}\n\nimport json as _gym_json\n_gym_args = _gym_json.loads({literal})\n\
if not isinstance(_gym_args, list):\n    _gym_args = [_gym_args]\n\
_gym_out = {entry_point}(*_gym_args)\nprint()\nprint({sentinel:?})\nprint(_gym_out)\n",
        sentinel = RESULT_SENTINEL
    )
}

/// Runs the submitted code once per test input. Each input is a JSON value;
/// a list is spread as positional arguments. The printed return value must
/// canonically equal the expected output.
pub fn verify_output_signature(
    ws: &Workspace,
    code: &str,
    gold: &GroundTruth,
    entry_point: &str,
    timeout: Duration,
) -> Result<Verdict, VerifyError> {
    let GroundTruth::OutputSignature { test_inputs, expected_outputs } = gold else {
        return Err(VerifyError::WrongGroundTruth(gold.variant_name()));
    };
    if !is_identifier(entry_point) {
        return Ok(Verdict::failure(format!("invalid entry point name {entry_point:?}")));
    }
    if code.trim().is_empty() {
        return Ok(Verdict::failure("no code submitted"));
    }
    for (i, (input, expected)) in test_inputs.iter().zip(expected_outputs).enumerate() {
        let exec = ws.execute_code(&driver(code, entry_point, input), timeout, CaptureMode::StdoutOnly)?;
        if exec.timed_out {
            return Ok(Verdict::failure(format!("input {i}: timed out after {} ms", exec.limit_ms)));
        }
        if !exec.exit_status.success() {
            let last = exec.stderr.lines().rfind(|l| !l.trim().is_empty()).unwrap_or("no error output");
            return Ok(Verdict::failure(format!("input {i}: crashed ({})", last.trim())));
        }
        let Some(pos) = exec.stdout.rfind(RESULT_SENTINEL) else {
            return Ok(Verdict::failure(format!("input {i}: no result produced")));
        };
        let produced = &exec.stdout[pos + RESULT_SENTINEL.len()..];
        if canonical_text(produced, false) != canonical_text(expected, false) {
            return Ok(Verdict::failure(format!(
                "input {i}: expected {:?}, got {:?}",
                canonical_text(expected, false),
                canonical_text(produced, false)
            )));
        }
    }
    Ok(Verdict::exact(true, format!("all {} test inputs match", test_inputs.len())))
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>), String> {
    let delim = if path.extension().is_some_and(|e| e == "tsv") { b'\t' } else { b',' };
    let mut rdr = csv::ReaderBuilder::new().delimiter(delim).from_path(path).map_err(|e| e.to_string())?;
    let headers = rdr.headers().map_err(|e| e.to_string())?.iter().map(|h| h.trim().to_string()).collect();
    let records = rdr.records().collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())?;
    Ok((headers, records))
}

fn keyed(
    headers: &[String],
    records: &[csv::StringRecord],
    id_col: &str,
    val_col: &str,
) -> Result<BTreeMap<String, String>, String> {
    let find = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| format!("missing column `{name}`"));
    let (id_i, val_i) = (find(id_col)?, find(val_col)?);
    let mut out = BTreeMap::new();
    for (n, rec) in records.iter().enumerate() {
        let id = rec.get(id_i).map(str::trim).unwrap_or("").to_string();
        let val = rec.get(val_i).map(str::trim).ok_or_else(|| format!("row {} has no `{val_col}` value", n + 2))?;
        if id.is_empty() {
            return Err(format!("row {} has an empty `{id_col}`", n + 2));
        }
        if out.insert(id.clone(), val.to_string()).is_some() {
            return Err(format!("duplicate id `{id}`"));
        }
    }
    Ok(out)
}

/// Accuracy of a prediction file against gold labels. Missing ids count as
/// wrong; ids not in the gold set are ignored.
pub fn score_predictions(
    pred_path: &Path,
    gold: &GroundTruth,
    config: &VerificationConfig,
) -> Result<Verdict, VerifyError> {
    let GroundTruth::LabelFile { path, id_column, label_column } = gold else {
        return Err(VerifyError::WrongGroundTruth(gold.variant_name()));
    };
    let gold_err = |message: String| VerifyError::GoldLabels { path: path.display().to_string(), message };
    let (gh, gr) = read_table(path).map_err(gold_err)?;
    let labels = keyed(&gh, &gr, id_column, label_column).map_err(gold_err)?;
    if labels.is_empty() {
        return Err(gold_err("no labels".into()));
    }
    let (ph, pr) = read_table(pred_path).map_err(VerifyError::MalformedPredictionFile)?;
    let preds = keyed(&ph, &pr, id_column, &config.prediction_column).map_err(VerifyError::MalformedPredictionFile)?;
    let correct = labels
        .iter()
        .filter(|(id, label)| preds.get(*id).is_some_and(|p| canonical_cell(p, false) == canonical_cell(label, false)))
        .count();
    let score = correct as f64 / labels.len() as f64;
    let success = score >= config.success_threshold;
    Ok(Verdict {
        success,
        score,
        detail: format!("accuracy {correct}/{} (threshold {})", labels.len(), config.success_threshold),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::suites::VerificationMode;
    use std::fs;

    fn cfg(mode: VerificationMode) -> VerificationConfig {
        VerificationConfig {
            mode,
            success_threshold: 1.0,
            db_resource: None,
            delimiter: Delimiter::Auto,
            case_insensitive: false,
            prediction_column: "prediction".into(),
        }
    }

    fn value(v: &str) -> GroundTruth {
        GroundTruth::ValueExact { value: v.into() }
    }

    #[test]
    fn exact_rules() {
        assert!(verify_exact(" 42 ", &value("42"), false).success);
        assert!(verify_exact("3.1400", &GroundTruth::Numeric { value: 3.14, abs_tol: 0.0, rel_tol: 0.0 }, false).success);
        assert!(!verify_exact("Abc", &value("abc"), false).success);
        assert!(verify_exact("Abc", &value("abc"), true).success);
        assert!(verify_exact("heart   failure", &value("heart failure"), false).success);
        assert!(!verify_exact("3.15", &GroundTruth::Numeric { value: 3.14, abs_tol: 0.0, rel_tol: 0.0 }, false).success);
        assert!(verify_exact("3.15", &GroundTruth::Numeric { value: 3.14, abs_tol: 0.02, rel_tol: 0.0 }, false).success);
        assert!(verify_exact("101", &GroundTruth::Numeric { value: 100.0, abs_tol: 0.0, rel_tol: 0.01 }, false).success);
        assert!(!verify_exact("n/a", &GroundTruth::Numeric { value: 1.0, abs_tol: 1.0, rel_tol: 0.0 }, false).success);
    }

    #[test]
    fn cells() {
        assert_eq!(canonical_cell("14.0", false), "14");
        assert_eq!(canonical_cell(" None ", false), "NULL");
        assert_eq!(canonical_cell("63.6", false), "63.6");
        assert_eq!(canonical_cell("1e3", false), "1000");
        assert_eq!(canonical_cell("ELECTIVE", true), "elective");
    }

    fn three_row_db(dir: &Path) -> std::path::PathBuf {
        let p = dir.join("t.db");
        let conn = rusqlite::Connection::open(&p).unwrap();
        conn.execute_batch(
            "CREATE TABLE patients (id INTEGER, sex TEXT, age REAL);
             INSERT INTO patients VALUES (1,'F',70.0),(2,'M',65.5),(3,'F',NULL);",
        )
        .unwrap();
        p
    }

    #[test]
    fn result_sets() {
        let dir = tempfile::tempdir().unwrap();
        let db = three_row_db(dir.path());
        let c = cfg(VerificationMode::ResultSet);
        assert!(verify_result_set("3", "SELECT COUNT(*) FROM patients", &db, &c).unwrap().success);
        let q = "SELECT id, sex FROM patients";
        assert!(verify_result_set("3\tF\n1\tF\n2\tM\n", q, &db, &c).unwrap().success);
        assert!(verify_result_set("(3, 'F')\n(1, 'F')\n(2, 'M')", q, &db, &c).unwrap().success);
        assert!(!verify_result_set("3\tF\n1\tF\n2\tM\n4\tM\n", q, &db, &c).unwrap().success);
        assert!(!verify_result_set("1\tF\n1\tF\n2\tM\n", q, &db, &c).unwrap().success);
        assert!(verify_result_set("70\n65.5\nNone", "SELECT age FROM patients", &db, &c).unwrap().success);
        assert!(matches!(
            verify_result_set("1", "SELECT * FROM nope", &db, &c),
            Err(VerifyError::GoldQueryFailed { .. })
        ));
    }

    #[test]
    fn predictions() {
        let dir = tempfile::tempdir().unwrap();
        let gold_path = dir.path().join("labels.csv");
        fs::write(&gold_path, "id,label\na,1\nb,0\nc,1\n").unwrap();
        let gold = GroundTruth::LabelFile { path: gold_path, id_column: "id".into(), label_column: "label".into() };
        let mut c = cfg(VerificationMode::LabelFile);
        c.success_threshold = 0.6;
        let pred = dir.path().join("pred.csv");
        fs::write(&pred, "id,prediction\na,1\nb,1\nc,1\n").unwrap();
        let v = score_predictions(&pred, &gold, &c).unwrap();
        assert!((v.score - 2.0 / 3.0).abs() < 1e-12 && v.success);
        fs::write(&pred, "id,prediction\nx,1\n").unwrap();
        let v = score_predictions(&pred, &gold, &c).unwrap();
        assert_eq!(v.score, 0.0);
        assert!(!v.success);
        fs::write(&pred, "id,prediction\na,1\na,0\n").unwrap();
        assert!(matches!(score_predictions(&pred, &gold, &c), Err(VerifyError::MalformedPredictionFile(_))));
        fs::write(&pred, "id,guess\na,1\n").unwrap();
        assert!(matches!(score_predictions(&pred, &gold, &c), Err(VerifyError::MalformedPredictionFile(_))));
    }
}
