//! Per-task workspaces and bounded execution of agent code and commands.
//!
//! Each workspace is a directory holding a read-only copy of the task's
//! resources (`data/`) and a writable `scratch/` directory used as the
//! working directory of every execution. Executions run in their own process
//! group, are killed as a group on timeout, and have their output captured
//! through tail-keeping byte caps. When the orchestrator runs as root the
//! child drops to an unprivileged uid so file permissions actually bind.

mod fsutil;
pub mod terminal;

use std::collections::VecDeque;
use std::fs;
use std::io::{self, Read};
use std::os::unix::fs::PermissionsExt;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ExecutionResult, ExitStatus, Resource, TaskSpec};

pub use fsutil::hash_tree;
use terminal::{check_command, TerminalContext};

/// Environment variable overriding the default workspace root.
pub const SANDBOX_ROOT_ENV: &str = "GYM_SANDBOX_ROOT";

pub const DEFAULT_OUTPUT_CAP: usize = 64 * 1024;

/// Slack allowed beyond an execution's limit before it is considered overrun.
pub const GRACE: Duration = Duration::from_millis(500);

const NOBODY: u32 = 65534;

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("workspace root {} is not writable: {source}", path.display())]
    RootNotWritable { path: PathBuf, source: io::Error },
    #[error("failed to expose resource `{name}`: {source}")]
    ResourceCopyFailed { name: String, source: io::Error },
    #[error("failed to spawn `{program}`: {source}")]
    SpawnFailed { program: String, source: io::Error },
    #[error("command denied by rule `{rule}`: {detail}")]
    CommandDenied { rule: &'static str, detail: String },
    #[error("workspace is already running an execution")]
    Busy,
    #[error("workspace has been destroyed")]
    Destroyed,
    #[error("sandbox I/O error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptureMode {
    #[default]
    StdoutOnly,
    Harness,
}

/// Execution settings, usually taken from a suite manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxConfig {
    /// Interpreter invocation; `{file}` is replaced by the code file name.
    pub interpreter_cmd: String,
    /// Harness invocation; `{file}` and `{result}` are substituted.
    pub harness_cmd: Option<String>,
    pub code_file_ext: String,
    pub stdout_cap: usize,
    pub stderr_cap: usize,
    pub env_allowlist: Vec<String>,
    pub allow_install: bool,
    /// uid/gid executions run as; `None` selects nobody when running as root.
    pub run_as: Option<(u32, u32)>,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        SandboxConfig {
            interpreter_cmd: "python3 {file}".into(),
            harness_cmd: None,
            code_file_ext: "py".into(),
            stdout_cap: DEFAULT_OUTPUT_CAP,
            stderr_cap: DEFAULT_OUTPUT_CAP,
            env_allowlist: vec!["PATH".into(), "LANG".into(), "LC_ALL".into(), "TZ".into()],
            allow_install: false,
            run_as: None,
        }
    }
}

impl SandboxConfig {
    fn effective_run_as(&self) -> Option<(u32, u32)> {
        self.run_as.or_else(|| {
            // SAFETY: geteuid has no preconditions.
            let euid = unsafe { libc::geteuid() };
            (euid == 0).then_some((NOBODY, NOBODY))
        })
    }
}

/// Record written by the in-sandbox harness (one JSON line).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessResult {
    pub status: HarnessStatus,
    #[serde(default)]
    pub answer_repr: Option<String>,
    #[serde(default)]
    pub stdout_tail: String,
    #[serde(default)]
    pub error_type: Option<String>,
    #[serde(default)]
    pub error_msg: Option<String>,
    #[serde(default)]
    pub duration_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HarnessStatus {
    Ok,
    Error,
}

impl HarnessResult {
    pub fn parse(text: &str) -> Result<Self, serde_json::Error> {
        let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
        serde_json::from_str(line)
    }
}

/// The default workspace root: `$GYM_SANDBOX_ROOT`, else `<tmp>/gym-sandbox`.
pub fn default_root() -> PathBuf {
    std::env::var_os(SANDBOX_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("gym-sandbox"))
}

/// An isolated directory for one episode.
#[derive(Debug)]
pub struct Workspace {
    root: PathBuf,
    data_dir: PathBuf,
    scratch_dir: PathBuf,
    config: SandboxConfig,
    sources: Vec<Resource>,
    data_hash: String,
    busy: AtomicBool,
    destroyed: AtomicBool,
    exec_counter: AtomicU32,
    process_groups: Mutex<Vec<i32>>,
}

/// Creates a fresh workspace for `task` under `root`.
pub fn create_workspace(task: &TaskSpec, root: &Path, config: &SandboxConfig) -> Result<Workspace, SandboxError> {
    let not_writable = |source| SandboxError::RootNotWritable { path: root.to_path_buf(), source };
    fs::create_dir_all(root).map_err(not_writable)?;
    let run_as = config.effective_run_as();
    if run_as.is_some() {
        // the unprivileged child needs to traverse into its workspace
        let mode = fs::metadata(root).map_err(not_writable)?.permissions().mode();
        if mode & 0o001 == 0 {
            fs::set_permissions(root, fs::Permissions::from_mode(mode | 0o711)).map_err(not_writable)?;
        }
    }
    let prefix: String =
        task.task_id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    let ws_root = tempfile::Builder::new().prefix(&format!("{prefix}-")).tempdir_in(root).map_err(not_writable)?.keep();
    fs::set_permissions(&ws_root, fs::Permissions::from_mode(0o755))?;

    let data_dir = ws_root.join("data");
    let scratch_dir = ws_root.join("scratch");
    fs::create_dir(&data_dir)?;
    fs::create_dir(&scratch_dir)?;

    let cleanup = |e: SandboxError| {
        let _ = fsutil::make_writable(&ws_root);
        let _ = fs::remove_dir_all(&ws_root);
        e
    };
    for res in &task.resources {
        fsutil::copy_tree(&res.path, &data_dir.join(&res.name))
            .map_err(|source| cleanup(SandboxError::ResourceCopyFailed { name: res.name.clone(), source }))?;
    }
    fsutil::make_read_only(&data_dir).map_err(|e| cleanup(e.into()))?;
    if let Some((uid, gid)) = run_as {
        std::os::unix::fs::chown(&scratch_dir, Some(uid), Some(gid)).map_err(|e| cleanup(e.into()))?;
    }
    fs::set_permissions(&scratch_dir, fs::Permissions::from_mode(0o700)).map_err(|e| cleanup(e.into()))?;
    let data_hash = hash_tree(&data_dir).map_err(|e| cleanup(e.into()))?;

    Ok(Workspace {
        root: ws_root,
        data_dir,
        scratch_dir,
        config: config.clone(),
        sources: task.resources.clone(),
        data_hash,
        busy: AtomicBool::new(false),
        destroyed: AtomicBool::new(false),
        exec_counter: AtomicU32::new(0),
        process_groups: Mutex::new(Vec::new()),
    })
}

struct BusyGuard<'a>(&'a AtomicBool);

impl Drop for BusyGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::Release);
    }
}

impl Workspace {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn scratch_dir(&self) -> &Path {
        &self.scratch_dir
    }

    pub fn config(&self) -> &SandboxConfig {
        &self.config
    }

    /// Hash of the data directory recorded at creation.
    pub fn data_hash(&self) -> &str {
        &self.data_hash
    }

    fn acquire(&self) -> Result<BusyGuard<'_>, SandboxError> {
        if self.destroyed.load(Ordering::Acquire) {
            return Err(SandboxError::Destroyed);
        }
        if self.busy.swap(true, Ordering::AcqRel) {
            return Err(SandboxError::Busy);
        }
        Ok(BusyGuard(&self.busy))
    }

    /// Runs agent code. Failures of the code itself are reported in the result.
    pub fn execute_code(&self, code: &str, timeout: Duration, mode: CaptureMode) -> Result<ExecutionResult, SandboxError> {
        let _guard = self.acquire()?;
        let n = self.exec_counter.fetch_add(1, Ordering::Relaxed) + 1;
        let file_name = format!("cell_{n}.{}", self.config.code_file_ext);
        let file_path = self.scratch_dir.join(&file_name);
        fs::write(&file_path, code)?;
        fs::set_permissions(&file_path, fs::Permissions::from_mode(0o644))?;

        let result_name = format!(".result_{n}.json");
        let result_path = self.scratch_dir.join(&result_name);
        let template = match (mode, &self.config.harness_cmd) {
            (CaptureMode::Harness, Some(h)) => h.as_str(),
            _ => self.config.interpreter_cmd.as_str(),
        };
        let argv: Vec<String> = template
            .split_whitespace()
            .map(|w| w.replace("{file}", &file_name).replace("{result}", &result_name))
            .collect();
        if argv.is_empty() {
            return Err(SandboxError::SpawnFailed {
                program: String::new(),
                source: io::Error::new(io::ErrorKind::InvalidInput, "empty interpreter command"),
            });
        }

        let mut result = self.run_process(&argv, timeout)?;
        result.captured_answer = match mode {
            _ if result.failed() => None,
            CaptureMode::Harness if self.config.harness_cmd.is_some() => {
                match fs::read_to_string(&result_path).map(|t| HarnessResult::parse(&t)) {
                    Ok(Ok(rec)) if rec.status == HarnessStatus::Ok => rec.answer_repr,
                    Ok(Ok(_)) => None,
                    _ => {
                        result.stderr.push_str("\n[sandbox] harness result record missing or malformed");
                        None
                    }
                }
            }
            _ => last_nonempty_line(&result.stdout),
        };
        let _ = fs::remove_file(&result_path);
        Ok(result)
    }

    /// Runs a terminal command after checking it against the suite policy.
    pub fn execute_terminal(&self, command: &str, timeout: Duration) -> Result<ExecutionResult, SandboxError> {
        let ctx = TerminalContext {
            root: &self.root,
            data_dir: &self.data_dir,
            scratch_dir: &self.scratch_dir,
            allow_install: self.config.allow_install,
        };
        let argv = check_command(command, &ctx)
            .map_err(|d| SandboxError::CommandDenied { rule: d.rule, detail: d.detail })?;
        let _guard = self.acquire()?;
        self.run_process(&argv, timeout)
    }

    fn run_process(&self, argv: &[String], timeout: Duration) -> Result<ExecutionResult, SandboxError> {
        let mut cmd = Command::new(&argv[0]);
        cmd.args(&argv[1..])
            .current_dir(&self.scratch_dir)
            .env_clear()
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .process_group(0);
        for key in &self.config.env_allowlist {
            if let Some(v) = std::env::var_os(key) {
                cmd.env(key, v);
            }
        }
        if std::env::var_os("PATH").is_none() || !self.config.env_allowlist.iter().any(|k| k == "PATH") {
            cmd.env("PATH", "/usr/local/bin:/usr/bin:/bin");
        }
        cmd.env("HOME", &self.scratch_dir)
            .env("GYM_DATA_DIR", &self.data_dir)
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .env("PYTHONUNBUFFERED", "1");
        if let Some((uid, gid)) = self.config.effective_run_as() {
            cmd.uid(uid).gid(gid);
        }

        let start = Instant::now();
        let mut child = cmd
            .spawn()
            .map_err(|source| SandboxError::SpawnFailed { program: argv[0].clone(), source })?;
        let pgid = child.id() as i32;
        self.process_groups.lock().unwrap_or_else(|p| p.into_inner()).push(pgid);

        let (done_tx, done_rx) = mpsc::channel();
        let stdout = spawn_reader(child.stdout.take(), self.config.stdout_cap, done_tx.clone());
        let stderr = spawn_reader(child.stderr.take(), self.config.stderr_cap, done_tx);

        let deadline = start + timeout;
        let mut timed_out = false;
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            let now = Instant::now();
            if now >= deadline {
                timed_out = true;
                kill_group(pgid);
                break child.wait()?;
            }
            thread::sleep((deadline - now).min(Duration::from_millis(5)));
        };
        let wall = start.elapsed();
        // stragglers from the same group do not outlive the execution
        kill_group(pgid);

        // readers finish once every writer of the pipes is gone; do not hang on
        // processes that escaped the group
        let reader_deadline = Instant::now() + GRACE / 2;
        for _ in 0..2 {
            let left = reader_deadline.saturating_duration_since(Instant::now());
            if done_rx.recv_timeout(left).is_err() {
                break;
            }
        }

        let exit_status = if timed_out {
            ExitStatus::Signal(libc::SIGKILL)
        } else if let Some(code) = status.code() {
            ExitStatus::Code(code)
        } else {
            ExitStatus::Signal(status.signal().unwrap_or(libc::SIGKILL))
        };
        let mut stderr_text = stderr.lock().unwrap_or_else(|p| p.into_inner()).render();
        if self.restore_data_if_modified()? {
            if !stderr_text.is_empty() && !stderr_text.ends_with('\n') {
                stderr_text.push('\n');
            }
            stderr_text.push_str("[sandbox] modification of the read-only data directory was detected and reverted\n");
        }
        let stdout_text = stdout.lock().unwrap_or_else(|p| p.into_inner()).render();
        Ok(ExecutionResult {
            exit_status,
            stdout: stdout_text,
            stderr: stderr_text,
            timed_out,
            wall_ms: wall.as_millis() as u64,
            captured_answer: None,
            limit_ms: timeout.as_millis() as u64,
        })
    }

    /// Re-hashes the data directory and restores it from the task sources if
    /// it no longer matches. Returns whether a restore happened.
    fn restore_data_if_modified(&self) -> Result<bool, SandboxError> {
        if hash_tree(&self.data_dir).ok().as_deref() == Some(self.data_hash.as_str()) {
            return Ok(false);
        }
        log::warn!("data directory of {} changed; restoring", self.root.display());
        fsutil::make_writable(&self.data_dir)?;
        fs::remove_dir_all(&self.data_dir)?;
        fs::create_dir(&self.data_dir)?;
        for res in &self.sources {
            fsutil::copy_tree(&res.path, &self.data_dir.join(&res.name))
                .map_err(|source| SandboxError::ResourceCopyFailed { name: res.name.clone(), source })?;
        }
        fsutil::make_read_only(&self.data_dir)?;
        Ok(true)
    }

    /// Kills every process group spawned here and removes the workspace.
    /// Idempotent; errors are logged rather than returned.
    pub fn destroy(&self) {
        if self.destroyed.swap(true, Ordering::AcqRel) {
            return;
        }
        for pgid in self.process_groups.lock().unwrap_or_else(|p| p.into_inner()).drain(..) {
            kill_group(pgid);
        }
        if let Err(e) = fsutil::make_writable(&self.root).and_then(|_| fs::remove_dir_all(&self.root)) {
            log::warn!("failed to remove workspace {}: {e}", self.root.display());
        }
    }

    pub fn is_destroyed(&self) -> bool {
        self.destroyed.load(Ordering::Acquire)
    }
}

impl Drop for Workspace {
    fn drop(&mut self) {
        self.destroy();
    }
}

pub fn destroy_workspace(ws: &Workspace) {
    ws.destroy();
}

fn kill_group(pgid: i32) {
    // SAFETY: killpg only sends a signal; ESRCH for a vanished group is fine.
    unsafe {
        libc::killpg(pgid, libc::SIGKILL);
    }
}

fn last_nonempty_line(text: &str) -> Option<String> {
    text.lines().map(str::trim).rfind(|l| !l.is_empty() && !l.starts_with("[... ")).map(str::to_string)
}

/// Byte sink keeping only the last `cap` bytes written.
#[derive(Debug)]
struct TailBuffer {
    cap: usize,
    buf: VecDeque<u8>,
    total: usize,
}

impl TailBuffer {
    fn new(cap: usize) -> Self {
        TailBuffer { cap, buf: VecDeque::new(), total: 0 }
    }

    fn push(&mut self, bytes: &[u8]) {
        self.total += bytes.len();
        self.buf.extend(bytes);
        let excess = self.buf.len().saturating_sub(self.cap);
        self.buf.drain(..excess);
    }

    /// Renders the kept bytes; when bytes were dropped, a marker line leads
    /// and the total stays within `cap`.
    fn render(&self) -> String {
        let bytes: Vec<u8> = self.buf.iter().copied().collect();
        if self.total <= self.cap {
            return String::from_utf8_lossy(&bytes).into_owned();
        }
        let marker = format!("[... {} bytes truncated ...]\n", self.total - self.cap);
        let keep = self.cap.saturating_sub(marker.len());
        let mut tail = &bytes[bytes.len() - keep.min(bytes.len())..];
        // skip a partial UTF-8 sequence at the cut
        while let Some((&b, rest)) = tail.split_first() {
            if b & 0xC0 != 0x80 {
                break;
            }
            tail = rest;
        }
        let mut text = String::from_utf8_lossy(tail).into_owned();
        // lossy replacement can grow the text; trim from the front
        while marker.len() + text.len() > self.cap && !text.is_empty() {
            let first = text.chars().next().map_or(1, char::len_utf8);
            text.drain(..first);
        }
        marker + &text
    }
}

fn spawn_reader<R: Read + Send + 'static>(
    stream: Option<R>,
    cap: usize,
    done: mpsc::Sender<()>,
) -> Arc<Mutex<TailBuffer>> {
    let buf = Arc::new(Mutex::new(TailBuffer::new(cap)));
    let sink = Arc::clone(&buf);
    thread::spawn(move || {
        if let Some(mut s) = stream {
            let mut chunk = [0u8; 8192];
            loop {
                match s.read(&mut chunk) {
                    Ok(0) | Err(_) => break,
                    Ok(n) => sink.lock().unwrap_or_else(|p| p.into_inner()).push(&chunk[..n]),
                }
            }
        }
        let _ = done.send(());
    });
    buf
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tail_buffer_keeps_tail_within_cap() {
        let mut b = TailBuffer::new(64);
        for i in 0..100 {
            b.push(format!("line {i}\n").as_bytes());
        }
        let out = b.render();
        assert!(out.len() <= 64, "{} > 64", out.len());
        assert!(out.starts_with("[... "));
        assert!(out.ends_with("line 99\n"));
    }

    #[test]
    fn tail_buffer_untruncated_is_verbatim() {
        let mut b = TailBuffer::new(64);
        b.push(b"4\n");
        assert_eq!(b.render(), "4\n");
    }

    #[test]
    fn last_line_capture() {
        assert_eq!(last_nonempty_line("a\n\n  b  \n\n").as_deref(), Some("b"));
        assert_eq!(last_nonempty_line("\n \n"), None);
    }

    #[test]
    fn harness_record_parses() {
        let rec = HarnessResult::parse(r#"{"status":"ok","answer_repr":"42","stdout_tail":"","duration_ms":3}"#).unwrap();
        assert_eq!(rec.status, HarnessStatus::Ok);
        assert_eq!(rec.answer_repr.as_deref(), Some("42"));
    }
}
