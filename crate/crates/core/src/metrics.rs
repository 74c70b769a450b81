//! Evaluation and analysis: validation loss/accuracy, steps-to-target,
//! ensembles and prediction churn between retrains.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::losses::LOG_FLOOR;
use crate::matrix::Matrix;
use crate::nn::{predict_proba, Batch, Parameters};
use crate::{Error, Result};

/// Examples per forward pass during evaluation.
const EVAL_CHUNK: usize = 1024;

/// One row of experiment output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    /// Completed training steps.
    pub step: u64,
    pub wall_seconds: f64,
    /// Mean training loss of the most recent step; absent before the first step.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Cumulative bytes of in-group gradient exchange and parameter broadcast.
    pub bytes_grad_exchange: u64,
    /// Cumulative bytes of checkpoint publishes and loads.
    pub bytes_checkpoint: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub cross_entropy: f64,
    pub accuracy: f64,
}

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(EVAL_CHUNK).map(move |s| (s..(s + EVAL_CHUNK).min(n)).collect())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Mean hard-label cross entropy and top-1 accuracy over a dataset.
pub fn eval(params: &Parameters, validation: &Dataset) -> Result<EvalResult> {
    eval_with(validation, |batch| predict_proba(params, batch))
}

/// Like [`eval`] for an arbitrary probability source (e.g. an ensemble).
pub fn eval_with(
    validation: &Dataset,
    mut predict: impl FnMut(&Batch) -> Result<Matrix>,
) -> Result<EvalResult> {
    if validation.is_empty() {
        return Err(Error::InvalidDataset("empty validation set".into()));
    }
    let mut nll = 0.0;
    let mut correct = 0usize;
    for idx in chunks(validation.len()) {
        let batch = validation.batch(&idx)?;
        let probs = predict(&batch)?;
        for (row, &y) in probs.iter_rows().zip(batch.labels()) {
            nll -= row[y].max(LOG_FLOOR).ln();
            if argmax(row) == y {
                correct += 1;
            }
        }
    }
    let n = validation.len() as f64;
    Ok(EvalResult { cross_entropy: nll / n, accuracy: correct as f64 / n })
}

/// First recorded step whose validation loss is at or below `target`.
pub fn steps_to_target(records: &[MetricRecord], target: f64) -> Option<u64> {
    records.iter().find(|r| r.val_loss <= target).map(|r| r.step)
}

pub fn best_val_loss(records: &[MetricRecord]) -> Option<f64> {
    records.iter().map(|r| r.val_loss).reduce(f64::min)
}

/// Arithmetic mean of the members' predicted distributions.
pub fn ensemble_predict(members: &[Parameters], batch: &Batch) -> Result<Matrix> {
    let first = members.first().ok_or_else(|| Error::InvalidConfig("empty ensemble".into()))?;
    if members.iter().any(|m| !m.same_architecture(first)) {
        return Err(Error::ArchitectureMismatch);
    }
    let mut sum = predict_proba(first, batch)?;
    for m in &members[1..] {
        let p = predict_proba(m, batch)?;
        for (s, v) in sum.as_mut_slice().iter_mut().zip(p.as_slice()) {
            *s += v;
        }
    }
    Ok(sum.scale(1.0 / members.len() as f64))
}

/// Mean over examples of the mean over classes of `|p_a - p_b|`.
pub fn prediction_churn(a: &Parameters, b: &Parameters, validation: &Dataset) -> Result<f64> {
    if !a.same_architecture(b) {
        return Err(Error::ArchitectureMismatch);
    }
    if validation.is_empty() {
        return Err(Error::InvalidDataset("empty validation set".into()));
    }
    let batch = validation.full_batch()?;
    churn_between(&predict_proba(a, &batch)?, &predict_proba(b, &batch)?)
}

/// Churn between two precomputed prediction matrices.
pub fn churn_between(pa: &Matrix, pb: &Matrix) -> Result<f64> {
    pa.check_same_shape(pb)?;
    if pa.rows() == 0 || pa.cols() == 0 {
        return Err(Error::InvalidDataset("no predictions".into()));
    }
    let k = pa.cols() as f64;
    let total: f64 = pa
        .iter_rows()
        .zip(pb.iter_rows())
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| (x - y).abs()).sum::<f64>() / k)
        .sum();
    Ok(total / pa.rows() as f64)
}

/// Mean and half the range of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub half_range: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Spread> {
        if values.is_empty() {
            return None;
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(Spread { mean, half_range: (hi - lo) / 2.0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairChurn {
    pub a: usize,
    pub b: usize,
    pub churn: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChurnReport {
    /// Churn for every unordered pair of retrains.
    pub pairs: Vec<PairChurn>,
    pub churn: Spread,
    pub val_log_loss: Spread,
}

/// Churn over all unordered pairs of retrain predictions on one validation set.
pub fn churn_from_predictions(predictions: &[Matrix], val_log_losses: &[f64]) -> Result<ChurnReport> {
    if predictions.len() < 2 || predictions.len() != val_log_losses.len() {
        return Err(Error::InvalidConfig("churn needs at least two retrains".into()));
    }
    let mut pairs = Vec::new();
    for a in 0..predictions.len() {
        for b in a + 1..predictions.len() {
            pairs.push(PairChurn { a, b, churn: churn_between(&predictions[a], &predictions[b])? });
        }
    }
    let values: Vec<f64> = pairs.iter().map(|p| p.churn).collect();
    Ok(ChurnReport {
        churn: Spread::of(&values).expect("non-empty"),
        val_log_loss: Spread::of(val_log_losses).expect("non-empty"),
        pairs,
    })
}

/// Retrains a model `n_repeats` times (`train` receives the repeat index and
/// picks the seeds) and measures churn between all pairs of retrains.
pub fn churn_experiment(
    n_repeats: usize,
    validation: &Dataset,
    mut train: impl FnMut(usize) -> Result<Parameters>,
) -> Result<ChurnReport> {
    if n_repeats < 2 {
        return Err(Error::InvalidConfig("churn needs at least two retrains".into()));
    }
    let batch = validation.full_batch()?;
    let mut predictions = Vec::with_capacity(n_repeats);
    let mut losses = Vec::with_capacity(n_repeats);
    for r in 0..n_repeats {
        let params = train(r)?;
        predictions.push(predict_proba(&params, &batch)?);
        losses.push(eval(&params, validation)?.cross_entropy);
    }
    churn_from_predictions(&predictions, &losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, Architecture};

    fn record(step: u64, val_loss: f64) -> MetricRecord {
        MetricRecord {
            run_id: "r".into(),
            step,
            wall_seconds: 0.0,
            train_loss: None,
            val_loss,
            val_accuracy: 0.0,
            bytes_grad_exchange: 0,
            bytes_checkpoint: 0,
        }
    }

    fn constant_model(logits: &[f64]) -> Parameters {
        // zero weights, biases = logits: predicts the same distribution everywhere
        let arch = Architecture::classifier(2, vec![], logits.len()).unwrap();
        let mut values = vec![0.0; arch.param_count()];
        let n = values.len();
        values[n - logits.len()..].copy_from_slice(logits);
        Parameters::new(arch, values).unwrap()
    }

    fn toy_validation(labels: Vec<usize>, k: usize) -> Dataset {
        let n = labels.len();
        let values = (0..2 * n).map(|i| (i as f64 * 0.37).sin()).collect();
        Dataset::from_dense(2, values, labels, k, "toy").unwrap()
    }

    #[test]
    fn steps_to_target_examples() {
        let recs = vec![record(100, 1.0), record(200, 0.8), record(300, 0.6)];
        assert_eq!(steps_to_target(&recs, 0.7), Some(300));
        assert_eq!(steps_to_target(&recs, 2.0), Some(100));
        assert_eq!(steps_to_target(&recs, 0.1), None);
    }

    #[test]
    fn eval_confident_and_uniform() {
        let v = toy_validation(vec![1; 20], 10);
        let mut logits = vec![0.0; 10];
        logits[1] = 100.0;
        let r = eval(&constant_model(&logits), &v).unwrap();
        assert!(r.cross_entropy < 1e-12);
        assert_eq!(r.accuracy, 1.0);
        let labels: Vec<usize> = (0..20).map(|i| i % 10).collect();
        let r = eval(&constant_model(&[0.0; 10]), &toy_validation(labels, 10)).unwrap();
        assert!((r.cross_entropy - 10f64.ln()).abs() < 1e-12);
        assert!((r.accuracy - 0.1).abs() < 1e-12);
    }

    #[test]
    fn ensemble_examples() {
        let v = toy_validation(vec![0, 1, 0], 2);
        let batch = v.full_batch().unwrap();
        let a = init_params(Architecture::classifier(2, vec![3], 2).unwrap(), 1);
        let single = predict_proba(&a, &batch).unwrap();
        let ens = ensemble_predict(&[a.clone(), a.clone()], &batch).unwrap();
        assert!(single.max_abs_diff(&ens) < 1e-15);
        let p = ensemble_predict(&[constant_model(&[800.0, 0.0]), constant_model(&[0.0, 800.0])], &batch)
            .unwrap();
        for r in p.iter_rows() {
            assert_eq!(r, &[0.5, 0.5]);
        }
        let other = init_params(Architecture::classifier(2, vec![4], 2).unwrap(), 1);
        assert!(matches!(ensemble_predict(&[a, other], &batch), Err(Error::ArchitectureMismatch)));
    }

    #[test]
    fn churn_examples() {
        let v = toy_validation(vec![0, 1, 0, 1], 2);
        let a = init_params(Architecture::classifier(2, vec![3], 2).unwrap(), 1);
        let b = init_params(Architecture::classifier(2, vec![3], 2).unwrap(), 2);
        assert_eq!(prediction_churn(&a, &a, &v).unwrap(), 0.0);
        assert_eq!(prediction_churn(&a, &b, &v).unwrap(), prediction_churn(&b, &a, &v).unwrap());
        let c = prediction_churn(&constant_model(&[800.0, 0.0]), &constant_model(&[0.0, 800.0]), &v)
            .unwrap();
        assert_eq!(c, 1.0);
    }

    #[test]
    fn churn_experiment_identical_seeds_is_zero() {
        let v = toy_validation(vec![0, 1, 0, 1], 2);
        let arch = std::sync::Arc::new(Architecture::classifier(2, vec![3], 2).unwrap());
        let report = churn_experiment(2, &v, |_| Ok(init_params(arch.clone(), 4))).unwrap();
        assert_eq!(report.churn.mean, 0.0);
        let report = churn_experiment(3, &v, |r| Ok(init_params(arch.clone(), r as u64))).unwrap();
        assert_eq!(report.pairs.len(), 3);
        assert!(report.churn.mean > 0.0);
        assert!(churn_experiment(1, &v, |_| Ok(init_params(arch.clone(), 0))).is_err());
    }

    #[test]
    fn spread_is_mean_and_half_range() {
        let s = Spread::of(&[1.0, 2.0, 4.0]).unwrap();
        assert!((s.mean - 7.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.half_range, 1.5);
        assert!(Spread::of(&[]).is_none());
    }
}
