use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::ledger::{ByteCause, CommLedger};
use crate::data::{batch_stream, interleave, BatchStream, Dataset, Interleave, Shard};
use crate::losses::{combined_loss, CombinedLossSpec, DistillLossKind, TeacherSignal};
use crate::matrix::Matrix;
use crate::metrics::{eval, MetricRecord};
use crate::nn::{backward_with_tape, forward, forward_with_tape, init_params, predict_proba};
use crate::nn::{Architecture, Batch, Parameters};
use crate::optim::{step_in_place, OptimizerConfig, OptimizerState};
use crate::{seed, Divergence, Error, Result};

/// Training loss above which a run counts as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupConfig {
    pub n_workers: usize,
    pub per_worker_batch: usize,
    pub optimizer: OptimizerConfig,
    pub loss: CombinedLossSpec,
    /// Drives initialisation, and the data streams unless `data_seed` is set.
    pub seed: u64,
    /// Seed for the workers' sub-shard split and batch order. Groups that
    /// share a shard and a data seed see identical batches.
    pub data_seed: Option<u64>,
}

impl GroupConfig {
    pub fn new(n_workers: usize, per_worker_batch: usize, optimizer: OptimizerConfig, seed: u64) -> Self {
        Self { n_workers, per_worker_batch, optimizer, loss: CombinedLossSpec::hard_only(), seed, data_seed: None }
    }

    pub fn stream_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn effective_batch(&self) -> usize {
        self.n_workers * self.per_worker_batch
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_workers == 0 || self.per_worker_batch == 0 {
            return Err(Error::InvalidConfig("workers and per-worker batch must be at least 1".into()));
        }
        self.optimizer.validate()?;
        self.loss.validate()
    }
}

/// Source of the distillation target for a batch.
#[derive(Debug, Clone)]
pub enum Teacher {
    /// Mean prediction of these models (probabilities or logits, following the loss).
    Ensemble(Vec<Parameters>),
    /// One-hot labels of the batch itself.
    Labels,
}

impl Teacher {
    /// The aggregated target for `batch`: mean probabilities for the
    /// cross-entropy and KL losses, mean logits for `logit_mse`.
    pub fn signal(&self, batch: &Batch, kind: DistillLossKind, n_classes: usize) -> Result<TeacherSignal> {
        match self {
            Teacher::Labels => {
                if kind.wants_logits() {
                    return Err(Error::IncompatibleTeacher {
                        loss: kind.as_str(),
                        expected: "logits",
                        found: "labels",
                    });
                }
                let mut m = Matrix::zeros(batch.len(), n_classes);
                for (r, &y) in batch.labels().iter().enumerate() {
                    if y >= n_classes {
                        return Err(Error::LabelOutOfRange { label: y, classes: n_classes });
                    }
                    m.row_mut(r)[y] = 1.0;
                }
                Ok(TeacherSignal::Probs(m))
            }
            Teacher::Ensemble(members) => {
                let first = members.first().ok_or(Error::MissingTeacher)?;
                let predict = |p: &Parameters| -> Result<Matrix> {
                    if kind.wants_logits() {
                        forward(p, batch)
                    } else {
                        predict_proba(p, batch)
                    }
                };
                let mut sum = predict(first)?;
                for m in &members[1..] {
                    let next = predict(m)?;
                    for (s, v) in sum.as_mut_slice().iter_mut().zip(next.as_slice()) {
                        *s += v;
                    }
                }
                let mean = if members.len() > 1 { sum.scale(1.0 / members.len() as f64) } else { sum };
                Ok(if kind.wants_logits() { TeacherSignal::Logits(mean) } else { TeacherSignal::Probs(mean) })
            }
        }
    }
}

/// `W` synchronous workers, each holding a replica of the model and its
/// own optimizer state, fed from disjoint sub-shards of the group's shard.
#[derive(Debug, Clone)]
pub struct WorkerGroup {
    id: u32,
    config: GroupConfig,
    replicas: Vec<Parameters>,
    opt_states: Vec<OptimizerState>,
    streams: Vec<BatchStream>,
    step: u64,
    ledger: CommLedger,
    last_loss: Option<f64>,
}

impl WorkerGroup {
    pub fn new(id: u32, config: GroupConfig, arch: Arc<Architecture>, shard: &Shard) -> Result<Self> {
        config.validate()?;
        let w = config.n_workers;
        let params = init_params(arch, config.seed);
        let data_seed = config.stream_seed();
        let sub_shards = shard.split(w, seed::derive(data_seed, "worker-split", 0))?;
        let streams = sub_shards
            .into_iter()
            .enumerate()
            .map(|(i, s)| batch_stream(s, config.per_worker_batch, seed::derive(data_seed, "worker", i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let opt_states = (0..w).map(|_| OptimizerState::new(&config.optimizer, params.len())).collect();
        Ok(Self {
            id,
            replicas: vec![params; w],
            opt_states,
            streams,
            step: 0,
            ledger: CommLedger::new(),
            last_loss: None,
            config,
        })
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn config(&self) -> &GroupConfig {
        &self.config
    }

    /// The group's model (worker 0's replica; all replicas are identical).
    pub fn params(&self) -> &Parameters {
        &self.replicas[0]
    }

    pub fn replicas(&self) -> &[Parameters] {
        &self.replicas
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut CommLedger {
        &mut self.ledger
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.last_loss
    }

    /// A copy of the workers' batch streams joined into one stream of
    /// `W * B` examples, positioned where the group's streams are now.
    pub fn interleaved_stream(&self) -> Interleave {
        interleave(self.streams.clone()).expect("at least one worker")
    }

    /// Draws the next per-worker batches.
    pub fn next_batches(&mut self) -> Vec<Batch> {
        self.streams.iter_mut().map(BatchStream::next_batch).collect()
    }

    /// One synchronous step: every worker computes the gradient of `loss` on
    /// its batch, gradients are averaged in worker order, and every replica
    /// applies the same optimizer update. Returns the mean worker loss.
    pub fn step_with(
        &mut self,
        batches: &[Batch],
        loss: &CombinedLossSpec,
        teacher: Option<&Teacher>,
    ) -> Result<f64> {
        let w = self.config.n_workers;
        if batches.len() != w {
            return Err(Error::DimensionMismatch(format!("{} batches for {w} workers", batches.len())));
        }
        if let Some(b) = batches.iter().find(|b| b.len() != self.config.per_worker_batch) {
            return Err(Error::DimensionMismatch(format!(
                "worker batch of {} examples, expected {}",
                b.len(),
                self.config.per_worker_batch
            )));
        }
        let n_classes = self.params().architecture().n_classes();
        let param_bytes = (self.params().len() * 8) as u64;
        let mut sum: Option<Parameters> = None;
        let mut loss_sum = 0.0;
        for (replica, batch) in self.replicas.iter().zip(batches) {
            let tape = forward_with_tape(replica, batch)?;
            let signal = match (teacher, loss.needs_teacher()) {
                (Some(t), true) => Some(t.signal(batch, loss.distill, n_classes)?),
                _ => None,
            };
            let out = combined_loss(loss, batch.labels(), tape.logits(), signal.as_ref())?;
            let grad = backward_with_tape(replica, batch, &tape, &out.grad)?;
            loss_sum += out.loss;
            self.ledger.charge(self.id, ByteCause::GradientExchange, param_bytes);
            match &mut sum {
                None => sum = Some(grad),
                Some(acc) => {
                    for (a, g) in acc.values_mut().iter_mut().zip(grad.values()) {
                        *a += g;
                    }
                }
            }
        }
        let mut mean = sum.expect("at least one worker");
        if w > 1 {
            let denom = w as f64;
            mean.values_mut().iter_mut().for_each(|v| *v /= denom);
        }
        for (replica, state) in self.replicas.iter_mut().zip(&mut self.opt_states) {
            step_in_place(&self.config.optimizer, state, replica, &mean)?;
            self.ledger.charge(self.id, ByteCause::ParamBroadcast, param_bytes);
        }
        self.step += 1;
        let mean_loss = loss_sum / w as f64;
        self.last_loss = Some(mean_loss);
        Ok(mean_loss)
    }
}

/// Plain synchronous step using the group's own loss spec.
pub fn sync_group_step(group: &mut WorkerGroup, batches: &[Batch]) -> Result<f64> {
    let loss = group.config.loss.clone();
    group.step_with(batches, &loss, None)
}

/// When to evaluate during training.
#[derive(Debug, Clone, Copy)]
pub struct EvalPlan<'a> {
    pub validation: &'a Dataset,
    /// Evaluate after every `every` steps (0: only at the start and end).
    pub every: u64,
}

impl EvalPlan<'_> {
    pub(crate) fn due(&self, steps_done: u64, n_steps: u64) -> bool {
        steps_done == n_steps || (self.every > 0 && steps_done.is_multiple_of(self.every))
    }
}

pub(crate) fn record(
    run_id: &str,
    group: &WorkerGroup,
    plan: &EvalPlan<'_>,
    started: Instant,
) -> Result<MetricRecord> {
    let e = eval(group.params(), plan.validation)?;
    let bytes = group.ledger.entity(group.id);
    Ok(MetricRecord {
        run_id: run_id.to_string(),
        step: group.step,
        wall_seconds: started.elapsed().as_secs_f64(),
        train_loss: group.last_loss,
        val_loss: e.cross_entropy,
        val_accuracy: e.accuracy,
        bytes_grad_exchange: bytes.sgd(),
        bytes_checkpoint: bytes.checkpoint(),
    })
}

pub(crate) fn check_divergence(run_id: &str, step: u64, loss: f64, records: &[MetricRecord]) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_THRESHOLD {
        return Err(Error::Diverged(Box::new(Divergence {
            run_id: run_id.to_string(),
            step,
            loss,
            records: records.to_vec(),
        })));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: Parameters,
    pub records: Vec<MetricRecord>,
    pub ledger: CommLedger,
}

/// Trains a group with `loss` (and an optional fixed teacher) for `n_steps`,
/// evaluating per `plan`. Shared by the baseline and the offline student.
pub(crate) fn train_group(
    mut group: WorkerGroup,
    n_steps: u64,
    loss: &CombinedLossSpec,
    teacher: Option<&Teacher>,
    plan: &EvalPlan<'_>,
    run_id: &str,
) -> Result<TrainOutput> {
    let started = Instant::now();
    let mut records = vec![record(run_id, &group, plan, started)?];
    for s in 0..n_steps {
        let batches = group.next_batches();
        let loss_value = group.step_with(&batches, loss, teacher)?;
        check_divergence(run_id, s, loss_value, &records)?;
        if plan.due(s + 1, n_steps) {
            records.push(record(run_id, &group, plan, started)?);
        }
    }
    Ok(TrainOutput { params: group.params().clone(), ledger: group.ledger.clone(), records })
}

/// Independent synchronous-SGD training of one group.
pub fn train_baseline(
    config: &GroupConfig,
    arch: Arc<Architecture>,
    shard: &Shard,
    n_steps: u64,
    plan: &EvalPlan<'_>,
    run_id: &str,
) -> Result<TrainOutput> {
    let group = WorkerGroup::new(0, config.clone(), arch, shard)?;
    let loss = config.loss.clone();
    train_group(group, n_steps, &loss, None, plan, run_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_classification, ClassificationSpec};

    fn setup() -> (Arc<Architecture>, Arc<Dataset>) {
        let data = gen_classification(&ClassificationSpec::new(1, 64, 4, 3, 0.5)).unwrap();
        (Arc::new(Architecture::classifier(4, vec![6], 3).unwrap()), Arc::new(data))
    }

    #[test]
    fn replicas_stay_identical() {
        let (arch, data) = setup();
        let cfg = GroupConfig::new(4, 2, OptimizerConfig::adam(0.01), 3);
        let mut g = WorkerGroup::new(0, cfg, arch, &Shard::full(data)).unwrap();
        for _ in 0..20 {
            let b = g.next_batches();
            sync_group_step(&mut g, &b).unwrap();
            let first = g.replicas()[0].values();
            assert!(g.replicas().iter().all(|r| r.values() == first));
        }
        let bytes = g.ledger().entity(0);
        let pb = (g.params().len() * 8) as u64;
        assert_eq!(bytes.gradient_exchange, 20 * 4 * pb);
        assert_eq!(bytes.param_broadcast, 20 * 4 * pb);
    }

    #[test]
    fn rejects_wrong_batch_count_and_size() {
        let (arch, data) = setup();
        let cfg = GroupConfig::new(2, 2, OptimizerConfig::sgd(0.1), 3);
        let mut g = WorkerGroup::new(0, cfg, arch, &Shard::full(Arc::clone(&data))).unwrap();
        let one = data.batch(&[0, 1]).unwrap();
        assert!(sync_group_step(&mut g, std::slice::from_ref(&one)).is_err());
        let big = data.batch(&[0, 1, 2]).unwrap();
        assert!(sync_group_step(&mut g, &[one, big]).is_err());
    }

    #[test]
    fn zero_steps_returns_initial_params() {
        let (arch, data) = setup();
        let cfg = GroupConfig::new(1, 4, OptimizerConfig::sgd(0.1), 9);
        let plan = EvalPlan { validation: &data, every: 10 };
        let out = train_baseline(&cfg, Arc::clone(&arch), &Shard::full(Arc::clone(&data)), 0, &plan, "b").unwrap();
        assert_eq!(out.params, init_params(arch, 9));
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].step, 0);
        assert!(out.records[0].train_loss.is_none());
    }

    #[test]
    fn huge_learning_rate_diverges_with_records_kept() {
        let (arch, data) = setup();
        let cfg = GroupConfig::new(1, 8, OptimizerConfig::sgd(1e6), 1);
        let plan = EvalPlan { validation: &data, every: 1 };
        let err = train_baseline(&cfg, arch, &Shard::full(Arc::clone(&data)), 50, &plan, "d").unwrap_err();
        match err {
            Error::Diverged(d) => {
                assert_eq!(d.run_id, "d");
                assert!(!d.records.is_empty());
            }
            Error::NonFiniteGradient(_) => {}
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn label_teacher_is_onehot() {
        let (_, data) = setup();
        let b = data.batch(&[0, 1, 2]).unwrap();
        match Teacher::Labels.signal(&b, DistillLossKind::SoftCrossEntropy, 3).unwrap() {
            TeacherSignal::Probs(m) => {
                for (r, &y) in b.labels().iter().enumerate() {
                    assert_eq!(m.row(r)[y], 1.0);
                    assert_eq!(m.row(r).iter().sum::<f64>(), 1.0);
                }
            }
            TeacherSignal::Logits(_) => unreachable!(),
        }
        assert!(Teacher::Labels.signal(&b, DistillLossKind::LogitMse, 3).is_err());
    }
}
