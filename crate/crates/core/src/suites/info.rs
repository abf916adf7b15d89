//! Answers to `request_info` queries over a task's resources.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use thiserror::Error;

use crate::model::{InfoQuery, Resource, TaskSpec};

use super::InfoConfig;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum InfoError {
    #[error("unknown table `{0}`")]
    UnknownTable(String),
    #[error("unknown resource `{0}`")]
    UnknownResource(String),
    #[error("cannot read resource `{name}`: {message}")]
    Unreadable { name: String, message: String },
}

pub(crate) fn is_sqlite(r: &Resource) -> bool {
    matches!(
        r.path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("db" | "sqlite" | "sqlite3")
    )
}

fn is_delimited(r: &Resource) -> bool {
    matches!(
        r.path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("csv" | "tsv")
    )
}

pub(crate) fn open_read_only(path: &Path) -> rusqlite::Result<Connection> {
    Connection::open_with_flags(path, OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX)
}

fn unreadable(r: &Resource, e: impl ToString) -> InfoError {
    InfoError::Unreadable { name: r.name.clone(), message: e.to_string() }
}

fn sqlite_tables(conn: &Connection) -> rusqlite::Result<Vec<String>> {
    let mut stmt =
        conn.prepare("SELECT name FROM sqlite_master WHERE type IN ('table', 'view') AND name NOT LIKE 'sqlite_%' ORDER BY name")?;
    let rows = stmt.query_map([], |row| row.get::<_, String>(0))?;
    rows.collect()
}

pub(crate) fn render_value(v: ValueRef<'_>) -> String {
    match v {
        ValueRef::Null => "NULL".into(),
        ValueRef::Integer(i) => i.to_string(),
        ValueRef::Real(f) => f.to_string(),
        ValueRef::Text(t) => String::from_utf8_lossy(t).into_owned(),
        ValueRef::Blob(b) => format!("<blob {} bytes>", b.len()),
    }
}

fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

fn cap(text: String, max_chars: usize) -> String {
    let n = text.chars().count();
    if n <= max_chars {
        return text;
    }
    let mut out: String = text.chars().take(max_chars).collect();
    out.push_str(&format!("\n[... {} characters omitted ...]", n - max_chars));
    out
}

/// Where a table lives: a database resource or a delimited file.
enum TableSource<'a> {
    Sqlite(&'a Resource, Connection),
    Delimited(&'a Resource),
}

fn find_table<'a>(task: &'a TaskSpec, table: &str) -> Result<TableSource<'a>, InfoError> {
    for r in task.resources.iter().filter(|r| is_sqlite(r)) {
        let conn = open_read_only(&r.path).map_err(|e| unreadable(r, e))?;
        if sqlite_tables(&conn).map_err(|e| unreadable(r, e))?.iter().any(|t| t == table) {
            return Ok(TableSource::Sqlite(r, conn));
        }
    }
    for r in task.resources.iter().filter(|r| is_delimited(r)) {
        let stem = r.path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        if r.name == table || stem == table {
            return Ok(TableSource::Delimited(r));
        }
    }
    Err(InfoError::UnknownTable(table.to_string()))
}

fn csv_reader(r: &Resource) -> Result<csv::Reader<fs::File>, InfoError> {
    let delim = if r.path.extension().is_some_and(|e| e == "tsv") { b'\t' } else { b',' };
    csv::ReaderBuilder::new().delimiter(delim).flexible(true).from_path(&r.path).map_err(|e| unreadable(r, e))
}

fn infer_type(values: &[&str]) -> &'static str {
    let non_empty: Vec<&&str> = values.iter().filter(|v| !v.trim().is_empty()).collect();
    if non_empty.is_empty() {
        "TEXT"
    } else if non_empty.iter().all(|v| v.trim().parse::<i64>().is_ok()) {
        "INTEGER"
    } else if non_empty.iter().all(|v| v.trim().parse::<f64>().is_ok()) {
        "REAL"
    } else {
        "TEXT"
    }
}

fn list_resources(task: &TaskSpec) -> Result<String, InfoError> {
    if task.resources.is_empty() {
        return Ok("This task has no data resources.".into());
    }
    let mut out = String::new();
    for r in &task.resources {
        let size = fs::metadata(&r.path).map(|m| m.len()).unwrap_or(0);
        let detail = if is_sqlite(r) {
            let conn = open_read_only(&r.path).map_err(|e| unreadable(r, e))?;
            format!("sqlite database; tables: {}", sqlite_tables(&conn).map_err(|e| unreadable(r, e))?.join(", "))
        } else if is_delimited(r) {
            let mut rdr = csv_reader(r)?;
            let cols: Vec<String> = rdr.headers().map_err(|e| unreadable(r, e))?.iter().map(String::from).collect();
            format!("delimited table; columns: {}", cols.join(", "))
        } else {
            "file".into()
        };
        out.push_str(&format!("{} ({size} bytes, {detail})\n", r.name));
    }
    Ok(out)
}

fn table_schema(task: &TaskSpec, table: &str) -> Result<String, InfoError> {
    match find_table(task, table)? {
        TableSource::Sqlite(r, conn) => {
            let mut stmt =
                conn.prepare(&format!("PRAGMA table_info({})", quote_ident(table))).map_err(|e| unreadable(r, e))?;
            let cols = stmt
                .query_map([], |row| Ok((row.get::<_, String>(1)?, row.get::<_, String>(2)?)))
                .and_then(|rows| rows.collect::<rusqlite::Result<Vec<_>>>())
                .map_err(|e| unreadable(r, e))?;
            let count: i64 = conn
                .query_row(&format!("SELECT COUNT(*) FROM {}", quote_ident(table)), [], |row| row.get(0))
                .map_err(|e| unreadable(r, e))?;
            let mut out = format!("table {table} in {} ({count} rows)\n", r.name);
            for (name, ty) in cols {
                out.push_str(&format!("{name}\t{}\n", if ty.is_empty() { "ANY" } else { &ty }));
            }
            Ok(out)
        }
        TableSource::Delimited(r) => {
            let mut rdr = csv_reader(r)?;
            let headers: Vec<String> = rdr.headers().map_err(|e| unreadable(r, e))?.iter().map(String::from).collect();
            let records: Vec<csv::StringRecord> = rdr.records().collect::<Result<_, _>>().map_err(|e| unreadable(r, e))?;
            let mut out = format!("table {table} in {} ({} rows)\n", r.name, records.len());
            for (i, h) in headers.iter().enumerate() {
                let col: Vec<&str> = records.iter().take(200).map(|rec| rec.get(i).unwrap_or("")).collect();
                out.push_str(&format!("{h}\t{}\n", infer_type(&col)));
            }
            Ok(out)
        }
    }
}

fn sample_rows(task: &TaskSpec, table: &str, n: usize) -> Result<String, InfoError> {
    match find_table(task, table)? {
        TableSource::Sqlite(r, conn) => {
            let mut stmt = conn
                .prepare(&format!("SELECT * FROM {} LIMIT {n}", quote_ident(table)))
                .map_err(|e| unreadable(r, e))?;
            let names: Vec<String> = stmt.column_names().iter().map(|s| s.to_string()).collect();
            let ncols = names.len();
            let mut out = names.join("\t");
            out.push('\n');
            let mut rows = stmt.query([]).map_err(|e| unreadable(r, e))?;
            while let Some(row) = rows.next().map_err(|e| unreadable(r, e))? {
                let cells: Vec<String> =
                    (0..ncols).map(|i| row.get_ref(i).map(render_value).unwrap_or_default()).collect();
                out.push_str(&cells.join("\t"));
                out.push('\n');
            }
            Ok(out)
        }
        TableSource::Delimited(r) => {
            let mut rdr = csv_reader(r)?;
            let mut out = rdr.headers().map_err(|e| unreadable(r, e))?.iter().collect::<Vec<_>>().join("\t");
            out.push('\n');
            for rec in rdr.records().take(n) {
                let rec = rec.map_err(|e| unreadable(r, e))?;
                out.push_str(&rec.iter().collect::<Vec<_>>().join("\t"));
                out.push('\n');
            }
            Ok(out)
        }
    }
}

fn file_head(task: &TaskSpec, name: &str, n_lines: usize) -> Result<String, InfoError> {
    let r = task
        .resources
        .iter()
        .find(|r| r.name == name || r.path.file_name().is_some_and(|f| f == name))
        .ok_or_else(|| InfoError::UnknownResource(name.to_string()))?;
    if is_sqlite(r) {
        return Ok(format!("{} is a binary sqlite database; use table_schema or sample_rows instead.", r.name));
    }
    let f = fs::File::open(&r.path).map_err(|e| unreadable(r, e))?;
    let mut out = String::new();
    for line in BufReader::new(f).lines().take(n_lines) {
        out.push_str(&line.map_err(|e| unreadable(r, e))?);
        out.push('\n');
    }
    Ok(out)
}

/// Renders the answer to an info query. Output is deterministic and capped.
/// Sample rows start with one header line of column names.
pub fn answer_info(task: &TaskSpec, query: &InfoQuery, config: &InfoConfig) -> Result<String, InfoError> {
    let text = match query.clone().capped() {
        InfoQuery::ListResources => list_resources(task)?,
        InfoQuery::TableSchema { table } => table_schema(task, &table)?,
        InfoQuery::SampleRows { table, n } => sample_rows(task, &table, n)?,
        InfoQuery::FileHead { name, n_lines } => file_head(task, &name, n_lines)?,
    };
    Ok(cap(text, config.max_chars))
}
