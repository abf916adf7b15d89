//! Run configuration file (TOML) and flag merging.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::policy::PolicyConfig;
use crate::rollout::Backend;
use crate::suites::{bundled_manifests, BudgetOverrides};

use super::CliError;

pub const MAX_TURNS_LIMIT: u32 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub k: u32,
    /// Defaults to 0.0 then 0.6 for the remaining rollouts.
    pub temperatures: Option<Vec<f64>>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { k: 1, temperatures: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Suite manifest paths, relative to the config file.
    pub suites: Vec<PathBuf>,
    /// Also include every bundled suite.
    pub bundled: bool,
    pub policy: PolicyConfig,
    pub budget: BudgetOverrides,
    pub schedule: ScheduleConfig,
    pub pool_size: usize,
    pub backend: Backend,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub sandbox_root: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            suites: Vec::new(),
            bundled: false,
            policy: PolicyConfig::default(),
            budget: BudgetOverrides::default(),
            schedule: ScheduleConfig::default(),
            pool_size: 1,
            backend: Backend::default(),
            out_dir: PathBuf::from("gym-out"),
            seed: 0,
            sandbox_root: None,
        }
    }
}

impl RunConfig {
    /// Reads a config file; relative paths in it resolve against its directory.
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
        cfg.suites = cfg.suites.iter().map(|p| resolve(p)).collect();
        cfg.out_dir = resolve(&cfg.out_dir);
        cfg.sandbox_root = cfg.sandbox_root.as_deref().map(resolve);
        Ok(cfg)
    }

    /// Manifest paths to load, bundled suites first when requested.
    pub fn manifests(&self) -> Vec<PathBuf> {
        let mut out = if self.bundled { bundled_manifests() } else { Vec::new() };
        out.extend(self.suites.iter().cloned());
        out
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let manifests = self.manifests();
        if manifests.is_empty() {
            return Err(CliError::Config("no suites given; pass --suite PATH or --bundled".into()));
        }
        if let Some(missing) = manifests.iter().find(|p| !p.is_file()) {
            return Err(CliError::Config(format!("suite manifest not found: {}", missing.display())));
        }
        if let Some(n) = self.budget.max_turns {
            if n == 0 || n > MAX_TURNS_LIMIT {
                return Err(CliError::Config(format!("max_turns must be within 1..={MAX_TURNS_LIMIT}, got {n}")));
            }
        }
        for (name, v) in [("max_wall_s", self.budget.max_wall_s), ("max_exec_s", self.budget.max_exec_s)] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(CliError::Config(format!("{name} must be positive, got {v}")));
                }
            }
        }
        if self.pool_size == 0 {
            return Err(CliError::Config("pool_size must be at least 1".into()));
        }
        if self.schedule.k == 0 {
            return Err(CliError::Config("k must be at least 1".into()));
        }
        Ok(())
    }
}
