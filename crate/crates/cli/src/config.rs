//! Flat `section.key = value` experiment configs.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use codistill_core::nn::PayloadDtype;
use codistill_core::{DistillLossKind, OptimizerKind, ShardMode, TeacherMode};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Baseline,
    BatchSweep,
    Codistill,
    SameDataAblation,
    StalenessSweep,
    SmoothingBaseline,
    EnsembleBaseline,
    OfflineDistill,
    Churn,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 9] = [
        Self::Baseline,
        Self::BatchSweep,
        Self::Codistill,
        Self::SameDataAblation,
        Self::StalenessSweep,
        Self::SmoothingBaseline,
        Self::EnsembleBaseline,
        Self::OfflineDistill,
        Self::Churn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::BatchSweep => "batch_sweep",
            Self::Codistill => "codistill",
            Self::SameDataAblation => "same_data_ablation",
            Self::StalenessSweep => "staleness_sweep",
            Self::SmoothingBaseline => "smoothing_baseline",
            Self::EnsembleBaseline => "ensemble_baseline",
            Self::OfflineDistill => "offline_distill",
            Self::Churn => "churn",
        }
    }

    /// Whether the experiment trains codistilling groups.
    pub fn uses_codistillation(self) -> bool {
        !matches!(self, Self::Baseline | Self::BatchSweep)
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown experiment kind {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RunMode {
    #[default]
    Lockstep,
    Concurrent,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lockstep => "lockstep",
            Self::Concurrent => "concurrent",
        }
    }
}

impl FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lockstep" => Ok(Self::Lockstep),
            "concurrent" => Ok(Self::Concurrent),
            other => Err(format!("unknown mode {other:?} (expected lockstep or concurrent)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Classification,
    Text,
}

impl FromStr for DataKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "classification" => Ok(Self::Classification),
            "text" => Ok(Self::Text),
            other => Err(format!("unknown data kind {other:?} (expected classification or text)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub kind: DataKind,
    pub n_examples: usize,
    pub input_dim: usize,
    pub n_classes: usize,
    pub difficulty: f64,
    pub label_noise: f64,
    pub validation_fraction: f64,
    pub path: Option<PathBuf>,
    pub context_window: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSection {
    pub n_workers: usize,
    pub per_worker_batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimSection {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub adagrad_eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodistillSection {
    pub n_models: usize,
    pub burn_in: u64,
    pub reload_interval: u64,
    pub distill: DistillLossKind,
    pub distill_weight: f64,
    pub teacher_mode: TeacherMode,
    pub data_mode: ShardMode,
    pub payload: PayloadDtype,
    pub ramp_steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seeds: Vec<u64>,
    pub steps: u64,
    pub eval_every: u64,
    /// Fixed steps-to-target threshold; unset means "the seed's baseline best".
    pub target_loss: Option<f64>,
    pub mode: RunMode,
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub group: GroupSection,
    pub optim: OptimSection,
    pub codistill: CodistillSection,
    pub smoothing_weight: f64,
    pub staleness_intervals: Vec<u64>,
    pub batch_sweep_workers: Vec<usize>,
    pub offline_phase1_steps: u64,
    pub offline_phase2_steps: u64,
    pub churn_repeats: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::Codistill,
            seeds: vec![1, 2, 3, 4, 5],
            steps: 10_000,
            eval_every: 250,
            target_loss: None,
            mode: RunMode::Lockstep,
            output_dir: None,
            data: DataConfig {
                kind: DataKind::Classification,
                n_examples: 360_000,
                input_dim: 32,
                n_classes: 10,
                difficulty: 0.4,
                label_noise: 0.0,
                validation_fraction: 0.1,
                path: None,
                context_window: 8,
            },
            model: ModelConfig { hidden: vec![64], embedding_dim: 16 },
            group: GroupSection { n_workers: 1, per_worker_batch: 16 },
            optim: OptimSection {
                kind: OptimizerKind::Adam,
                learning_rate: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                adam_eps: 1e-8,
                adagrad_eps: 1e-10,
            },
            codistill: CodistillSection {
                n_models: 2,
                burn_in: 250,
                reload_interval: 50,
                distill: DistillLossKind::SoftCrossEntropy,
                distill_weight: 1.0,
                teacher_mode: TeacherMode::StaleCheckpoint,
                data_mode: ShardMode::Disjoint,
                payload: PayloadDtype::F64,
                ramp_steps: 0,
            },
            smoothing_weight: codistill_core::losses::DEFAULT_SMOOTHING_WEIGHT,
            staleness_intervals: vec![50, 250],
            batch_sweep_workers: vec![1, 2, 4, 8],
            offline_phase1_steps: 10_000,
            offline_phase2_steps: 10_000,
            churn_repeats: 5,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| CliError::config(key, format!("invalid value {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError>
where
    T::Err: fmt::Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn payload_from_str(key: &str, value: &str) -> Result<PayloadDtype, CliError> {
    match value {
        "f64" => Ok(PayloadDtype::F64),
        "f32" => Ok(PayloadDtype::F32),
        other => Err(CliError::config(key, format!("invalid value {other:?}: expected f64 or f32"))),
    }
}

fn payload_str(p: PayloadDtype) -> &'static str {
    match p {
        PayloadDtype::F64 => "f64",
        PayloadDtype::F32 => "f32",
    }
}

fn teacher_mode_str(m: TeacherMode) -> &'static str {
    match m {
        TeacherMode::StaleCheckpoint => "stale_checkpoint",
        TeacherMode::FreshInProcess => "fresh_in_process",
    }
}

fn shard_mode_str(m: ShardMode) -> &'static str {
    match m {
        ShardMode::Disjoint => "disjoint",
        ShardMode::Shared => "shared",
    }
}

fn optimizer_str(k: OptimizerKind) -> &'static str {
    match k {
        OptimizerKind::Sgd => "sgd",
        OptimizerKind::Adam => "adam",
        OptimizerKind::Adagrad => "adagrad",
    }
}

impl ExperimentConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CliError::Config {
                key: line.to_string(),
                message: format!("line {}: expected `key = value`", lineno + 1),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        // relative corpus paths are relative to the config file
        if let (Some(data), Some(dir)) = (cfg.data.path.as_mut(), path.parent()) {
            if data.is_relative() {
                *data = dir.join(&*data);
            }
        }
        Ok(cfg)
    }

    /// Sets one key; the error names the key on unknown keys or bad values.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "experiment.kind" => self.kind = parse(key, value)?,
            "experiment.seeds" => self.seeds = parse_list(key, value)?,
            "experiment.steps" => self.steps = parse(key, value)?,
            "experiment.eval_every" => self.eval_every = parse(key, value)?,
            "experiment.target_loss" => {
                self.target_loss = if value.is_empty() { None } else { Some(parse(key, value)?) }
            }
            "experiment.mode" => self.mode = parse(key, value)?,
            "output.dir" => self.output_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "data.kind" => self.data.kind = parse(key, value)?,
            "data.n_examples" => self.data.n_examples = parse(key, value)?,
            "data.input_dim" => self.data.input_dim = parse(key, value)?,
            "data.n_classes" => self.data.n_classes = parse(key, value)?,
            "data.difficulty" => self.data.difficulty = parse(key, value)?,
            "data.label_noise" => self.data.label_noise = parse(key, value)?,
            "data.validation_fraction" => self.data.validation_fraction = parse(key, value)?,
            "data.path" => self.data.path = (!value.is_empty()).then(|| PathBuf::from(value)),
            "data.context_window" => self.data.context_window = parse(key, value)?,
            "model.hidden" => self.model.hidden = parse_list(key, value)?,
            "model.embedding_dim" => self.model.embedding_dim = parse(key, value)?,
            "group.n_workers" => self.group.n_workers = parse(key, value)?,
            "group.per_worker_batch" => self.group.per_worker_batch = parse(key, value)?,
            "optim.kind" => self.optim.kind = parse(key, value)?,
            "optim.learning_rate" => self.optim.learning_rate = parse(key, value)?,
            "optim.beta1" => self.optim.beta1 = parse(key, value)?,
            "optim.beta2" => self.optim.beta2 = parse(key, value)?,
            "optim.adam_eps" => self.optim.adam_eps = parse(key, value)?,
            "optim.adagrad_eps" => self.optim.adagrad_eps = parse(key, value)?,
            "codistill.n_models" => self.codistill.n_models = parse(key, value)?,
            "codistill.burn_in" => self.codistill.burn_in = parse(key, value)?,
            "codistill.reload_interval" => self.codistill.reload_interval = parse(key, value)?,
            "codistill.distill" => self.codistill.distill = parse(key, value)?,
            "codistill.distill_weight" => self.codistill.distill_weight = parse(key, value)?,
            "codistill.teacher_mode" => self.codistill.teacher_mode = parse(key, value)?,
            "codistill.data_mode" => self.codistill.data_mode = parse(key, value)?,
            "codistill.payload" => self.codistill.payload = payload_from_str(key, value)?,
            "codistill.ramp_steps" => self.codistill.ramp_steps = parse(key, value)?,
            "smoothing.weight" => self.smoothing_weight = parse(key, value)?,
            "staleness.intervals" => self.staleness_intervals = parse_list(key, value)?,
            "batch_sweep.workers" => self.batch_sweep_workers = parse_list(key, value)?,
            "offline.phase1_steps" => self.offline_phase1_steps = parse(key, value)?,
            "offline.phase2_steps" => self.offline_phase2_steps = parse(key, value)?,
            "churn.repeats" => self.churn_repeats = parse(key, value)?,
            _ => return Err(CliError::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        vec![
            ("experiment.kind", self.kind.to_string()),
            ("experiment.seeds", join(&self.seeds)),
            ("experiment.steps", self.steps.to_string()),
            ("experiment.eval_every", self.eval_every.to_string()),
            ("experiment.target_loss", self.target_loss.map(|t| t.to_string()).unwrap_or_default()),
            ("experiment.mode", self.mode.as_str().to_string()),
            ("output.dir", opt(&self.output_dir)),
            (
                "data.kind",
                match self.data.kind {
                    DataKind::Classification => "classification",
                    DataKind::Text => "text",
                }
                .to_string(),
            ),
            ("data.n_examples", self.data.n_examples.to_string()),
            ("data.input_dim", self.data.input_dim.to_string()),
            ("data.n_classes", self.data.n_classes.to_string()),
            ("data.difficulty", self.data.difficulty.to_string()),
            ("data.label_noise", self.data.label_noise.to_string()),
            ("data.validation_fraction", self.data.validation_fraction.to_string()),
            ("data.path", opt(&self.data.path)),
            ("data.context_window", self.data.context_window.to_string()),
            ("model.hidden", join(&self.model.hidden)),
            ("model.embedding_dim", self.model.embedding_dim.to_string()),
            ("group.n_workers", self.group.n_workers.to_string()),
            ("group.per_worker_batch", self.group.per_worker_batch.to_string()),
            ("optim.kind", optimizer_str(self.optim.kind).to_string()),
            ("optim.learning_rate", self.optim.learning_rate.to_string()),
            ("optim.beta1", self.optim.beta1.to_string()),
            ("optim.beta2", self.optim.beta2.to_string()),
            ("optim.adam_eps", self.optim.adam_eps.to_string()),
            ("optim.adagrad_eps", self.optim.adagrad_eps.to_string()),
            ("codistill.n_models", self.codistill.n_models.to_string()),
            ("codistill.burn_in", self.codistill.burn_in.to_string()),
            ("codistill.reload_interval", self.codistill.reload_interval.to_string()),
            ("codistill.distill", self.codistill.distill.as_str().to_string()),
            ("codistill.distill_weight", self.codistill.distill_weight.to_string()),
            ("codistill.teacher_mode", teacher_mode_str(self.codistill.teacher_mode).to_string()),
            ("codistill.data_mode", shard_mode_str(self.codistill.data_mode).to_string()),
            ("codistill.payload", payload_str(self.codistill.payload).to_string()),
            ("codistill.ramp_steps", self.codistill.ramp_steps.to_string()),
            ("smoothing.weight", self.smoothing_weight.to_string()),
            ("staleness.intervals", join(&self.staleness_intervals)),
            ("batch_sweep.workers", join(&self.batch_sweep_workers)),
            ("offline.phase1_steps", self.offline_phase1_steps.to_string()),
            ("offline.phase2_steps", self.offline_phase2_steps.to_string()),
            ("churn.repeats", self.churn_repeats.to_string()),
        ]
    }

    /// Resolved config text; parsing it yields an equal config.
    pub fn to_resolved(&self, header: &[String]) -> String {
        let mut out = String::new();
        for line in header {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
        for (k, v) in self.entries() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::config("experiment.seeds", "at least one seed is required"));
        }
        if self.data.kind == DataKind::Text && self.data.path.is_none() {
            return Err(CliError::config("data.path", "text data needs a corpus path"));
        }
        if !(0.0 < self.data.validation_fraction && self.data.validation_fraction < 1.0) {
            return Err(CliError::config("data.validation_fraction", "must be in (0, 1)"));
        }
        if self.group.n_workers == 0 {
            return Err(CliError::config("group.n_workers", "must be at least 1"));
        }
        if self.group.per_worker_batch == 0 {
            return Err(CliError::config("group.per_worker_batch", "must be at least 1"));
        }
        if self.optim.learning_rate <= 0.0 || !self.optim.learning_rate.is_finite() {
            return Err(CliError::config("optim.learning_rate", "must be positive"));
        }
        if self.kind.uses_codistillation() {
            if self.codistill.n_models < 2 {
                return Err(CliError::config("codistill.n_models", "must be at least 2"));
            }
            if self.codistill.reload_interval == 0 {
                return Err(CliError::config("codistill.reload_interval", "must be at least 1"));
            }
            if self.codistill.burn_in < self.codistill.reload_interval {
                return Err(CliError::config("codistill.burn_in", "must be at least codistill.reload_interval"));
            }
        }
        match self.kind {
            ExperimentKind::StalenessSweep => {
                if self.staleness_intervals.is_empty() {
                    return Err(CliError::config("staleness.intervals", "no intervals given"));
                }
                if let Some(&r) = self.staleness_intervals.iter().find(|&&r| r == 0 || r > self.codistill.burn_in) {
                    return Err(CliError::config(
                        "staleness.intervals",
                        format!("interval {r} must be in 1..=codistill.burn_in"),
                    ));
                }
            }
            ExperimentKind::BatchSweep => {
                if self.batch_sweep_workers.is_empty() || self.batch_sweep_workers.contains(&0) {
                    return Err(CliError::config("batch_sweep.workers", "need a list of positive worker counts"));
                }
            }
            ExperimentKind::Churn if self.churn_repeats < 2 => {
                return Err(CliError::config("churn.repeats", "must be at least 2"));
            }
            _ => {}
        }
        if self.mode == RunMode::Concurrent && self.codistill.teacher_mode == TeacherMode::FreshInProcess {
            return Err(CliError::config("codistill.teacher_mode", "concurrent mode needs stale_checkpoint"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_resolved_text() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_resolved(&["provenance: test".into()]);
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = ExperimentConfig::parse("# hi\n\nexperiment.kind = baseline # trailing\n").unwrap();
        assert_eq!(cfg.kind, ExperimentKind::Baseline);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::parse("group.n_wrokers = 4").unwrap_err();
        assert!(err.to_string().contains("group.n_wrokers"), "{err}");
    }

    #[test]
    fn unknown_kind_names_the_key() {
        let err = ExperimentConfig::parse("experiment.kind = bogus").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("experiment.kind") && msg.contains("bogus"), "{msg}");
    }

    #[test]
    fn empty_seed_list_is_rejected() {
        let err = ExperimentConfig::parse("experiment.seeds =").unwrap_err();
        assert!(err.to_string().contains("experiment.seeds"));
    }

    #[test]
    fn burn_in_shorter_than_interval_is_rejected() {
        let err = ExperimentConfig::parse("codistill.burn_in = 10\ncodistill.reload_interval = 50").unwrap_err();
        assert!(err.to_string().contains("codistill.burn_in"));
    }

    #[test]
    fn hidden_list_may_be_empty() {
        let cfg = ExperimentConfig::parse("model.hidden =").unwrap();
        assert!(cfg.model.hidden.is_empty());
    }
}
