use crate::metrics::MetricRecord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("teacher row {row} is not a probability vector (sum {sum})")]
    TeacherNotNormalized { row: usize, sum: f64 },
    #[error("invalid smoothing: {0}")]
    InvalidSmoothing(String),
    #[error("distillation loss requires a teacher signal")]
    MissingTeacher,
    #[error("teacher signal is {found} but {loss} needs {expected}")]
    IncompatibleTeacher {
        loss: &'static str,
        expected: &'static str,
        found: &'static str,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient entry at index {0}")]
    NonFiniteGradient(usize),
    #[error("corrupt checkpoint header: {0}")]
    CorruptHeader(String),
    #[error("architecture fingerprint mismatch: expected {expected:#018x}, found {found:#018x}")]
    FingerprintMismatch { expected: u64, found: u64 },
    #[error("truncated checkpoint payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("models do not share one architecture")]
    ArchitectureMismatch,
    #[error("no checkpoint available for model {0}")]
    MissingCheckpoint(u32),
    #[error("checkpoint for model {model_id} at step {step} is not newer than step {latest}")]
    StalePublish { model_id: u32, step: u64, latest: u64 },
    #[error("training diverged: {0}")]
    Diverged(Box<Divergence>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A run that was aborted because its training loss blew up. Metrics
/// recorded before the abort are kept.
#[derive(Debug, Clone)]
pub struct Divergence {
    pub run_id: String,
    pub step: u64,
    pub loss: f64,
    pub records: Vec<MetricRecord>,
}

impl std::fmt::Display for Divergence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "run {} at step {} (train loss {})", self.run_id, self.step, self.loss)
    }
}
