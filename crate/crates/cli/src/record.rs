use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{io_err, CliError, CliResult};

pub const RECORD_FILE: &str = "run_record.json";

/// A fitted model's size and log-likelihood, as consumed by `aic-table`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub n_params: usize,
    pub loglik: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub n_fail: usize,
    pub clamps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub version: String,
    /// Canonical TOML of the effective config.
    pub config: Option<String>,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub workers: usize,
    pub wall_time_s: f64,
    pub models: Vec<ModelSummary>,
    pub diagnostics: Diagnostics,
    pub results: serde_json::Value,
    /// Files written next to the record.
    pub outputs: Vec<String>,
}

pub fn version_stamp() -> String {
    match option_env!("PANELPOMP_GIT_REV") {
        Some(rev) => format!("{} ({rev})", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

impl RunRecord {
    pub fn new(command: &str, cfg: Option<&RunConfig>, workers: usize) -> Self {
        RunRecord {
            command: command.to_string(),
            version: version_stamp(),
            config: cfg.map(RunConfig::canonical),
            config_hash: cfg.map(RunConfig::hash),
            seed: cfg.map(|c| c.seed),
            workers,
            wall_time_s: 0.0,
            models: Vec::new(),
            diagnostics: Diagnostics::default(),
            results: serde_json::Value::Null,
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(RECORD_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Io(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| io_err(&path, e))
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}
