//! Reading and appending trajectory logs (one JSON trajectory per line).

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread::{self, JoinHandle};

use crate::model::{parse_trajectory, serialize_trajectory, Trajectory};

use super::RolloutError;

/// Parses every line of a log. Blank lines are skipped; anything else that
/// fails to parse is reported with its 1-based line number.
pub fn read_log(path: &Path) -> Result<Vec<Trajectory>, RolloutError> {
    let file = File::open(path).map_err(|source| RolloutError::Io { path: path.to_path_buf(), source })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| RolloutError::Io { path: path.to_path_buf(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let t = parse_trajectory(&line)
            .map_err(|e| RolloutError::MalformedLine { path: path.to_path_buf(), line: i + 1, message: e.to_string() })?;
        out.push(t);
    }
    Ok(out)
}

/// Completed jobs recorded in an existing log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLedger {
    pub path: PathBuf,
    pub completed: BTreeSet<(String, u32)>,
    pub config_hash: Option<String>,
    /// Bytes of an unterminated final line that were cut off.
    pub truncated_bytes: u64,
}

impl RunLedger {
    /// Rebuilds the ledger from the log at `path`. A trailing line without a
    /// newline is the remnant of an interrupted write and is truncated away.
    pub fn recover(path: &Path) -> Result<RunLedger, RolloutError> {
        let io = |source| RolloutError::Io { path: path.to_path_buf(), source };
        let mut ledger = RunLedger { path: path.to_path_buf(), ..RunLedger::default() };
        if !path.exists() {
            return Ok(ledger);
        }
        let bytes = fs::read(path).map_err(io)?;
        let keep = bytes.iter().rposition(|&b| b == b'\n').map(|p| p + 1).unwrap_or(0);
        if keep < bytes.len() {
            ledger.truncated_bytes = (bytes.len() - keep) as u64;
            log::warn!("{}: dropping {} byte(s) of an unfinished line", path.display(), ledger.truncated_bytes);
            OpenOptions::new().write(true).open(path).and_then(|f| f.set_len(keep as u64)).map_err(io)?;
        }
        let text = String::from_utf8_lossy(&bytes[..keep]);
        for (i, line) in text.split('\n').enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let t = parse_trajectory(line)
                .map_err(|e| RolloutError::MalformedLine { path: path.to_path_buf(), line: i + 1, message: e.to_string() })?;
            match (&ledger.config_hash, &t.info.config_hash) {
                (None, Some(h)) => ledger.config_hash = Some(h.clone()),
                (Some(a), Some(b)) if a != b => {
                    return Err(RolloutError::ConfigMismatch { expected: a.clone(), found: b.clone() });
                }
                _ => {}
            }
            ledger.completed.insert((t.task_id, t.rollout_index));
        }
        Ok(ledger)
    }

    pub fn is_done(&self, task_id: &str, rollout_index: u32) -> bool {
        self.completed.contains(&(task_id.to_string(), rollout_index))
    }
}

/// The single writer of a log. Each trajectory becomes one line, flushed and
/// synced before the next is accepted.
pub struct Appender {
    tx: Option<mpsc::Sender<Trajectory>>,
    handle: Option<JoinHandle<Result<usize, RolloutError>>>,
}

impl Appender {
    pub fn open(path: &Path) -> Result<Appender, RolloutError> {
        let io = |source| RolloutError::Io { path: path.to_path_buf(), source };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        let (tx, rx) = mpsc::channel::<Trajectory>();
        let owned = path.to_path_buf();
        let handle = thread::spawn(move || {
            let io = |source| RolloutError::Io { path: owned.clone(), source };
            let mut written = 0;
            for t in rx {
                let mut line = serialize_trajectory(&t)
                    .map_err(|e| RolloutError::MalformedLine { path: owned.clone(), line: 0, message: e.to_string() })?;
                line.push('\n');
                file.write_all(line.as_bytes()).map_err(io)?;
                file.sync_data().map_err(io)?;
                written += 1;
            }
            Ok(written)
        });
        Ok(Appender { tx: Some(tx), handle: Some(handle) })
    }

    pub fn sender(&self) -> mpsc::Sender<Trajectory> {
        self.tx.clone().expect("appender open")
    }

    /// Waits for queued trajectories to be written; returns the line count.
    pub fn finish(mut self) -> Result<usize, RolloutError> {
        self.tx.take();
        match self.handle.take().expect("appender open").join() {
            Ok(r) => r,
            Err(_) => Err(RolloutError::WriterPanicked),
        }
    }
}

impl Drop for Appender {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
