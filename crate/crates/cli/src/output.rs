//! Output files.

use std::path::Path;

use codistill_core::MetricRecord;
use serde::Serialize;

use crate::experiment::RoleMean;
use crate::CliError;

pub const METRICS_HEADER: [&str; 8] = [
    "run_id",
    "step",
    "wall_seconds",
    "train_loss",
    "val_loss",
    "val_accuracy",
    "bytes_grad_exchange",
    "bytes_checkpoint",
];

pub fn write_metrics(path: &Path, records: &[MetricRecord]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in records {
        w.write_record([
            r.run_id.clone(),
            r.step.to_string(),
            format!("{:.6}", r.wall_seconds),
            r.train_loss.map(|l| l.to_string()).unwrap_or_default(),
            r.val_loss.to_string(),
            r.val_accuracy.to_string(),
            r.bytes_grad_exchange.to_string(),
            r.bytes_checkpoint.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub role: String,
    pub runs: usize,
    pub mean_final_val_loss: f64,
    pub mean_best_val_loss: f64,
    pub mean_final_val_accuracy: f64,
    pub reached_target: usize,
    pub mean_steps_to_target: Option<f64>,
}

impl SweepRow {
    pub fn new(axis: &str, value: &str, role: &str, m: &RoleMean) -> Self {
        Self {
            axis: axis.to_string(),
            value: value.to_string(),
            role: role.to_string(),
            runs: m.runs,
            mean_final_val_loss: m.final_val_loss,
            mean_best_val_loss: m.best_val_loss,
            mean_final_val_accuracy: m.final_val_accuracy,
            reached_target: m.reached_target,
            mean_steps_to_target: m.mean_steps_to_target,
        }
    }
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}
