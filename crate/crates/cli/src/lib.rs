//! Experiment runner for codistillation studies.
//!
//! A run reads a flat `section.key = value` config, trains every run the
//! experiment kind calls for (one family per seed), and writes
//! `metrics.csv`, `summary.json` and `config.resolved` to the output
//! directory. A sweep repeats a run over values of one config key and adds
//! `sweep.csv`.

use std::path::{Path, PathBuf};

pub mod config;
pub mod experiment;
pub mod output;

pub use config::{ExperimentConfig, ExperimentKind, RunMode};
pub use experiment::{execute, prepare_data, ExperimentReport, Failure, RunSummary};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error(transparent)]
    Core(#[from] codistill_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config { key: key.into(), message: message.into() }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    /// For errors crossing a core callback boundary.
    pub(crate) fn into_core(self) -> codistill_core::Error {
        match self {
            Self::Core(e) => e,
            other => codistill_core::Error::InvalidConfig(other.to_string()),
        }
    }
}

/// Runs `cfg` and writes its output files into `out`. Metrics recorded
/// before a failure are still written.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentReport, CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let checkpoints = (cfg.mode == RunMode::Concurrent).then(|| out.join("checkpoints"));
    match execute(cfg, checkpoints) {
        Ok(report) => {
            output::write_metrics(&out.join("metrics.csv"), &report.records)?;
            output::write_json(&out.join("summary.json"), &report)?;
            output::write_text(&out.join("config.resolved"), &cfg.to_resolved(&report.provenance))?;
            Ok(report)
        }
        Err(Failure { error, records }) => {
            output::write_metrics(&out.join("metrics.csv"), &records)?;
            output::write_text(&out.join("config.resolved"), &cfg.to_resolved(&[]))?;
            Err(error)
        }
    }
}

/// Runs `cfg` once per value of `axis`, each in `out/<axis>=<value>`, and
/// writes one `sweep.csv` row per value and role.
pub fn sweep(cfg: &ExperimentConfig, axis: &str, values: &[String], out: &Path) -> Result<Vec<ExperimentReport>, CliError> {
    if values.is_empty() {
        return Err(CliError::config(axis, "sweep needs at least one value"));
    }
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for value in values {
        let mut c = cfg.clone();
        c.set(axis, value)?;
        c.validate()?;
        let report = run(&c, &out.join(format!("{axis}={value}")))?;
        for (role, mean) in &report.roles {
            rows.push(output::SweepRow::new(axis, value, role, mean));
        }
        reports.push(report);
    }
    output::write_sweep(&out.join("sweep.csv"), &rows)?;
    Ok(reports)
}

/// Shifts every seed by `offset`.
pub fn apply_seed_offset(cfg: &mut ExperimentConfig, offset: u64) {
    for s in cfg.seeds.iter_mut() {
        *s = s.wrapping_add(offset);
    }
}
