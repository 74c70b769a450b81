//! Hard-label loss, distillation terms and label-smoothing targets.
//!
//! Every loss is averaged over the batch and returns its gradient with
//! respect to the logits, ready to feed into [`crate::nn::backward`].

use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::nn::softmax;
use crate::{Error, Result};

/// Lower clamp for probabilities inside `ln`.
pub const LOG_FLOOR: f64 = 1e-12;
/// Allowed deviation of a teacher row sum from 1.
pub const TEACHER_ROW_TOL: f64 = 1e-6;
/// Allowed deviation of a unigram distribution's sum from 1.
pub const UNIGRAM_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillLossKind {
    /// Cross entropy against the teacher's predictive distribution.
    #[default]
    SoftCrossEntropy,
    /// Mean squared difference of logits.
    LogitMse,
    KlDivergence,
    None,
}

impl DistillLossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DistillLossKind::SoftCrossEntropy => "soft_ce",
            DistillLossKind::LogitMse => "logit_mse",
            DistillLossKind::KlDivergence => "kl",
            DistillLossKind::None => "none",
        }
    }

    /// Whether this loss consumes teacher logits rather than probabilities.
    pub fn wants_logits(self) -> bool {
        matches!(self, DistillLossKind::LogitMse)
    }
}

impl std::str::FromStr for DistillLossKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "soft_ce" | "soft_cross_entropy" => Ok(Self::SoftCrossEntropy),
            "logit_mse" => Ok(Self::LogitMse),
            "kl" | "kl_divergence" => Ok(Self::KlDivergence),
            "none" => Ok(Self::None),
            other => Err(format!("unknown distillation loss {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothingKind {
    Uniform,
    Unigram(Vec<f64>),
}

impl SmoothingKind {
    pub fn unigram(probs: Vec<f64>) -> Result<Self> {
        let kind = SmoothingKind::Unigram(probs);
        kind.validate()?;
        Ok(kind)
    }

    pub fn validate(&self) -> Result<()> {
        if let SmoothingKind::Unigram(p) = self {
            if p.is_empty() {
                return Err(Error::InvalidSmoothing("unigram distribution is empty".into()));
            }
            if p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::InvalidSmoothing("unigram has a negative or non-finite entry".into()));
            }
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > UNIGRAM_SUM_TOL {
                return Err(Error::InvalidSmoothing(format!("unigram sums to {sum}")));
            }
        }
        Ok(())
    }
}

/// Label-smoothing regulariser: cross entropy toward a fixed target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Smoothing {
    pub kind: SmoothingKind,
    pub weight: f64,
}

/// Default weight for the smoothing baselines. Hand-picked, not tuned.
pub const DEFAULT_SMOOTHING_WEIGHT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedLossSpec {
    pub distill: DistillLossKind,
    /// Weight of the distillation term.
    pub distill_weight: f64,
    pub smoothing: Option<Smoothing>,
}

impl Default for CombinedLossSpec {
    fn default() -> Self {
        Self::hard_only()
    }
}

impl CombinedLossSpec {
    /// Plain hard-label training.
    pub fn hard_only() -> Self {
        Self { distill: DistillLossKind::None, distill_weight: 1.0, smoothing: None }
    }

    pub fn distill(kind: DistillLossKind, weight: f64) -> Self {
        Self { distill: kind, distill_weight: weight, smoothing: None }
    }

    pub fn smoothed(kind: SmoothingKind, weight: f64) -> Self {
        Self {
            distill: DistillLossKind::None,
            distill_weight: 1.0,
            smoothing: Some(Smoothing { kind, weight }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.distill_weight < 0.0 || !self.distill_weight.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "distill weight must be finite and >= 0, got {}",
                self.distill_weight
            )));
        }
        if let Some(s) = &self.smoothing {
            if self.distill != DistillLossKind::None {
                return Err(Error::InvalidConfig(
                    "smoothing and distillation cannot be combined in one run".into(),
                ));
            }
            if s.weight < 0.0 || !s.weight.is_finite() {
                return Err(Error::InvalidConfig(format!("smoothing weight {} is invalid", s.weight)));
            }
            s.kind.validate()?;
        }
        Ok(())
    }

    pub fn needs_teacher(&self) -> bool {
        self.distill != DistillLossKind::None
    }
}

/// The aggregated teacher prediction for one batch.
#[derive(Debug, Clone, PartialEq)]
pub enum TeacherSignal {
    Probs(Matrix),
    Logits(Matrix),
}

impl TeacherSignal {
    fn form(&self) -> &'static str {
        match self {
            TeacherSignal::Probs(_) => "probabilities",
            TeacherSignal::Logits(_) => "logits",
        }
    }

    pub fn matrix(&self) -> &Matrix {
        match self {
            TeacherSignal::Probs(m) | TeacherSignal::Logits(m) => m,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// d loss / d logits, `[B x K]`.
    pub grad: Matrix,
}

fn check_labels(labels: &[usize], logits: &Matrix) -> Result<()> {
    if labels.len() != logits.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(Error::LabelOutOfRange { label, classes: logits.cols() });
    }
    Ok(())
}

fn check_teacher_probs(teacher: &Matrix, logits: &Matrix) -> Result<()> {
    teacher.check_same_shape(logits)?;
    for (row, t) in teacher.iter_rows().enumerate() {
        let sum: f64 = t.iter().sum();
        if (sum - 1.0).abs() > TEACHER_ROW_TOL || t.iter().any(|&v| v < 0.0 || v.is_nan()) {
            return Err(Error::TeacherNotNormalized { row, sum });
        }
    }
    Ok(())
}

#[inline]
fn ln_clamped(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

/// Mean negative log-likelihood of the labels; grad `(softmax(z) - onehot(y)) / B`.
pub fn hard_ce(labels: &[usize], logits: &Matrix) -> Result<LossOutput> {
    check_labels(labels, logits)?;
    let b = logits.rows() as f64;
    let mut grad = softmax(logits);
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = grad.row_mut(r);
        total += -ln_clamped(row[y]);
        for (k, g) in row.iter_mut().enumerate() {
            let target = if k == y { 1.0 } else { 0.0 };
            *g = (*g - target) / b;
        }
    }
    Ok(LossOutput { loss: total / b, grad })
}

/// Cross entropy against soft targets; grad `(softmax(z) - t) / B`.
pub fn soft_ce(teacher_probs: &Matrix, logits: &Matrix) -> Result<LossOutput> {
    check_teacher_probs(teacher_probs, logits)?;
    let b = logits.rows() as f64;
    let mut grad = softmax(logits);
    let mut total = 0.0;
    for r in 0..grad.rows() {
        let t = teacher_probs.row(r);
        let row = grad.row_mut(r);
        let mut ce = 0.0;
        for (&tk, &pk) in t.iter().zip(row.iter()) {
            ce -= tk * ln_clamped(pk);
        }
        total += ce;
        for (g, &tk) in row.iter_mut().zip(t) {
            *g = (*g - tk) / b;
        }
    }
    Ok(LossOutput { loss: total / b, grad })
}

/// Mean over the batch of `(1/K) sum_k (z_k - teacher_k)^2`.
pub fn logit_mse(teacher_logits: &Matrix, logits: &Matrix) -> Result<LossOutput> {
    teacher_logits.check_same_shape(logits)?;
    let (rows, k) = logits.shape();
    let scale = (rows * k) as f64;
    let mut grad = Matrix::zeros(rows, k);
    let mut total = 0.0;
    for r in 0..rows {
        let (z, t) = (logits.row(r), teacher_logits.row(r));
        let mut sq = 0.0;
        for ((g, &zk), &tk) in grad.row_mut(r).iter_mut().zip(z).zip(t) {
            let d = zk - tk;
            sq += d * d;
            *g = 2.0 * d / scale;
        }
        total += sq / k as f64;
    }
    Ok(LossOutput { loss: total / rows as f64, grad })
}

/// `KL(teacher || softmax(z))` averaged over the batch. Same gradient as [`soft_ce`].
pub fn kl_div(teacher_probs: &Matrix, logits: &Matrix) -> Result<LossOutput> {
    check_teacher_probs(teacher_probs, logits)?;
    let b = logits.rows() as f64;
    let mut grad = softmax(logits);
    let mut total = 0.0;
    for r in 0..grad.rows() {
        let t = teacher_probs.row(r);
        let row = grad.row_mut(r);
        let mut kl = 0.0;
        for (&tk, &pk) in t.iter().zip(row.iter()) {
            if tk > 0.0 {
                kl += tk * (tk.ln() - ln_clamped(pk));
            }
        }
        total += kl;
        for (g, &tk) in row.iter_mut().zip(t) {
            *g = (*g - tk) / b;
        }
    }
    Ok(LossOutput { loss: total / b, grad })
}

/// Shannon entropy of a probability vector, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

pub fn smoothing_target(kind: &SmoothingKind, n_classes: usize) -> Result<Vec<f64>> {
    match kind {
        SmoothingKind::Uniform => {
            if n_classes == 0 {
                return Err(Error::InvalidSmoothing("zero classes".into()));
            }
            Ok(vec![1.0 / n_classes as f64; n_classes])
        }
        SmoothingKind::Unigram(p) => {
            kind.validate()?;
            if p.len() != n_classes {
                return Err(Error::InvalidSmoothing(format!(
                    "unigram has {} entries for {n_classes} classes",
                    p.len()
                )));
            }
            Ok(p.clone())
        }
    }
}

/// Hard-label loss plus the weighted distillation or smoothing term.
///
/// `teacher` must be present exactly when the spec has a distillation term:
/// probabilities for `soft_ce`/`kl`, logits for `logit_mse`.
pub fn combined_loss(
    spec: &CombinedLossSpec,
    labels: &[usize],
    logits: &Matrix,
    teacher: Option<&TeacherSignal>,
) -> Result<LossOutput> {
    spec.validate()?;
    let hard = hard_ce(labels, logits)?;
    if let Some(smoothing) = &spec.smoothing {
        if smoothing.weight == 0.0 {
            return Ok(hard);
        }
        let target = smoothing_target(&smoothing.kind, logits.cols())?;
        let rows: Vec<&[f64]> = (0..logits.rows()).map(|_| target.as_slice()).collect();
        let term = soft_ce(&Matrix::from_rows(&rows)?, logits)?;
        return add_weighted(hard, term, smoothing.weight);
    }
    let teacher = match (spec.distill, teacher) {
        (DistillLossKind::None, _) => return Ok(hard),
        (_, None) => return Err(Error::MissingTeacher),
        (_, Some(t)) => t,
    };
    let term = match (spec.distill, teacher) {
        (DistillLossKind::SoftCrossEntropy, TeacherSignal::Probs(t)) => soft_ce(t, logits)?,
        (DistillLossKind::KlDivergence, TeacherSignal::Probs(t)) => kl_div(t, logits)?,
        (DistillLossKind::LogitMse, TeacherSignal::Logits(t)) => logit_mse(t, logits)?,
        (kind, other) => {
            return Err(Error::IncompatibleTeacher {
                loss: kind.as_str(),
                expected: if kind.wants_logits() { "logits" } else { "probabilities" },
                found: other.form(),
            })
        }
    };
    if spec.distill_weight == 0.0 {
        return Ok(hard);
    }
    add_weighted(hard, term, spec.distill_weight)
}

fn add_weighted(base: LossOutput, term: LossOutput, weight: f64) -> Result<LossOutput> {
    let mut grad = base.grad;
    for (g, t) in grad.as_mut_slice().iter_mut().zip(term.grad.as_slice()) {
        *g += weight * t;
    }
    Ok(LossOutput { loss: base.loss + weight * term.loss, grad })
}
