//! Allow-list policy for terminal actions.

use std::path::Path;

use super::fsutil::normalize;

/// Why a terminal command was refused; `rule` is a stable identifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Denial {
    pub rule: &'static str,
    pub detail: String,
}

fn deny(rule: &'static str, detail: impl Into<String>) -> Denial {
    Denial { rule, detail: detail.into() }
}

const READ_ONLY: &[&str] = &[
    "ls", "cat", "head", "tail", "wc", "file", "stat", "du", "pwd", "grep", "find", "sort", "uniq", "md5sum",
    "sha256sum", "tree", "echo", "cut", "column",
];

const SCRATCH_MUTATING: &[&str] = &["mkdir", "touch", "rm", "rmdir", "cp", "mv"];

const SHELL_META: &[char] = &[';', '|', '&', '<', '>', '$', '`', '(', ')', '{', '}', '\n', '\\', '*', '?'];

#[derive(Debug, Clone, Copy)]
pub struct TerminalContext<'a> {
    pub root: &'a Path,
    pub data_dir: &'a Path,
    pub scratch_dir: &'a Path,
    pub allow_install: bool,
}

/// Checks a command line against the terminal policy. On success returns the
/// argument vector to execute directly (no shell is involved).
pub fn check_command(command: &str, ctx: &TerminalContext<'_>) -> Result<Vec<String>, Denial> {
    let command = command.trim();
    if command.is_empty() {
        return Err(deny("empty_command", "command is empty"));
    }
    if let Some(c) = command.chars().find(|c| SHELL_META.contains(c)) {
        return Err(deny("shell_syntax", format!("shell syntax `{c}` is not supported; run one plain command")));
    }
    let words: Vec<String> = command.split_whitespace().map(str::to_string).collect();
    let program = Path::new(&words[0]).file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let args = &words[1..];

    if is_install(&program, args) {
        if !ctx.allow_install {
            return Err(deny("install_disabled", "dependency installation is disabled for this suite"));
        }
        return Ok(words);
    }
    if matches!(program.as_str(), "pip" | "pip3") {
        return match args.first().map(String::as_str) {
            Some("list" | "show" | "freeze") => Ok(words),
            _ => Err(deny("not_allowlisted", format!("`{command}` is not an allowed pip subcommand"))),
        };
    }
    if matches!(program.as_str(), "python" | "python3") {
        return match args {
            [flag] if flag == "--version" || flag == "-V" => Ok(words),
            _ => Err(deny("use_code_execution", "run Python through a code_execution action")),
        };
    }

    let paths: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    if READ_ONLY.contains(&program.as_str()) {
        if program == "find" {
            if let Some(flag) =
                args.iter().find(|a| matches!(a.as_str(), "-delete" | "-exec" | "-execdir" | "-ok" | "-okdir" | "-fprint" | "-fprintf" | "-fls"))
            {
                return Err(deny("mutating_flag", format!("`find {flag}` may modify files")));
            }
        }
        if program == "sort" && args.iter().any(|a| a.starts_with("-o") || a.starts_with("--output")) {
            return Err(deny("mutating_flag", "`sort -o` writes files"));
        }
        let skip = match program.as_str() {
            "echo" => paths.len(),
            "grep" => 1,
            _ => 0,
        };
        for p in paths.iter().skip(skip) {
            let resolved = normalize(ctx.scratch_dir, p);
            if !resolved.starts_with(ctx.root) {
                return Err(deny("outside_workspace", format!("`{p}` is outside the workspace")));
            }
        }
        return Ok(words);
    }
    if SCRATCH_MUTATING.contains(&program.as_str()) {
        if paths.is_empty() {
            return Err(deny("missing_operand", format!("`{program}` needs a path operand")));
        }
        for p in &paths {
            let resolved = normalize(ctx.scratch_dir, p);
            if resolved.starts_with(ctx.data_dir) {
                return Err(deny("data_dir_immutable", format!("`{p}` is inside the read-only data directory")));
            }
            if !resolved.starts_with(ctx.scratch_dir) || resolved == ctx.scratch_dir {
                return Err(deny("outside_scratch", format!("`{p}` is outside the scratch directory")));
            }
        }
        return Ok(words);
    }
    Err(deny("not_allowlisted", format!("`{program}` is not an allowed terminal command")))
}

fn is_install(program: &str, args: &[String]) -> bool {
    let a: Vec<&str> = args.iter().map(String::as_str).collect();
    match program {
        "pip" | "pip3" | "uv" => a.first() == Some(&"install") || a.starts_with(&["pip", "install"]),
        "python" | "python3" => a.starts_with(&["-m", "pip", "install"]),
        "conda" | "mamba" | "apt" | "apt-get" | "npm" => a.first() == Some(&"install"),
        _ => false,
    }
}
