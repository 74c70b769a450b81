use std::sync::{Arc, Barrier};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::group::{check_divergence, record, EvalPlan, GroupConfig, Teacher, WorkerGroup};
use super::ledger::{ByteCause, CommLedger};
use super::store::{Checkpoint, CheckpointStore};
use crate::data::{Shard, ShardMode};
use crate::losses::{CombinedLossSpec, DistillLossKind};
use crate::metrics::MetricRecord;
use crate::nn::{Architecture, Parameters, PayloadDtype};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    /// Teachers are peers' checkpoints, exchanged every `reload_interval` steps.
    #[default]
    StaleCheckpoint,
    /// Teachers are peers' current parameters (all groups in one process).
    FreshInProcess,
}

impl std::str::FromStr for TeacherMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "stale_checkpoint" => Ok(Self::StaleCheckpoint),
            "fresh_in_process" => Ok(Self::FreshInProcess),
            other => Err(format!("unknown teacher mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodistillConfig {
    pub n_models: usize,
    /// Steps trained on the hard-label loss only.
    pub burn_in: u64,
    /// Steps between checkpoint exchanges.
    pub reload_interval: u64,
    pub distill: DistillLossKind,
    pub distill_weight: f64,
    pub teacher_mode: TeacherMode,
    pub data_mode: ShardMode,
    pub payload: PayloadDtype,
    /// Length of an optional linear ramp of the distillation weight after
    /// burn-in; 0 switches the term on at full weight.
    pub ramp_steps: u64,
}

impl CodistillConfig {
    pub fn new(n_models: usize, burn_in: u64, reload_interval: u64) -> Result<Self> {
        let cfg = Self {
            n_models,
            burn_in,
            reload_interval,
            distill: DistillLossKind::SoftCrossEntropy,
            distill_weight: 1.0,
            teacher_mode: TeacherMode::StaleCheckpoint,
            data_mode: ShardMode::Disjoint,
            payload: PayloadDtype::F64,
            ramp_steps: 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_models < 2 {
            return Err(Error::InvalidConfig(format!("codistillation needs >= 2 models, got {}", self.n_models)));
        }
        if self.reload_interval == 0 {
            return Err(Error::InvalidConfig("reload interval must be at least 1".into()));
        }
        if self.burn_in < self.reload_interval {
            return Err(Error::InvalidConfig(format!(
                "burn-in ({}) must be at least one reload interval ({})",
                self.burn_in, self.reload_interval
            )));
        }
        CombinedLossSpec::distill(self.distill, self.distill_weight).validate()
    }

    /// Loss used at a given step (counted from 0).
    pub fn loss_at(&self, step: u64) -> CombinedLossSpec {
        if step < self.burn_in {
            return CombinedLossSpec::hard_only();
        }
        let mut weight = self.distill_weight;
        if self.ramp_steps > 0 {
            let progress = (step - self.burn_in + 1) as f64 / self.ramp_steps as f64;
            weight *= progress.min(1.0);
        }
        CombinedLossSpec::distill(self.distill, weight)
    }
}

#[derive(Debug, Clone)]
pub struct CodistillOutput {
    /// Final parameters per model id.
    pub params: Vec<Parameters>,
    /// Metric rows per model id.
    pub records: Vec<Vec<MetricRecord>>,
    pub ledger: CommLedger,
    /// Largest `step - teacher_checkpoint_step` seen after burn-in.
    pub max_staleness: Option<u64>,
}

fn check_inputs(config: &CodistillConfig, groups: &[GroupConfig], shards: &[Shard]) -> Result<()> {
    config.validate()?;
    if groups.len() != config.n_models || shards.len() != config.n_models {
        return Err(Error::InvalidConfig(format!(
            "{} models need as many group configs and shards (got {} and {})",
            config.n_models,
            groups.len(),
            shards.len()
        )));
    }
    for (i, g) in groups.iter().enumerate() {
        if groups[..i].iter().any(|o| o.seed == g.seed) {
            return Err(Error::InvalidConfig(format!("group {i} reuses seed {}", g.seed)));
        }
    }
    Ok(())
}

/// Final parameters, records, ledger and max staleness of one group.
type GroupResult = (Parameters, Vec<MetricRecord>, CommLedger, Option<u64>);

fn run_id_for(run_id: &str, model: usize) -> String {
    format!("{run_id}-m{model}")
}

/// Loads every peer's latest checkpoint for `me`, charging the ledger.
fn load_peers(
    store: &dyn CheckpointStore,
    me: usize,
    n: usize,
    ledger: &mut CommLedger,
) -> Result<Vec<Checkpoint>> {
    (0..n)
        .filter(|&j| j != me)
        .map(|j| {
            let c = store.load_latest(j as u32)?.ok_or(Error::MissingCheckpoint(j as u32))?;
            ledger.charge(me as u32, ByteCause::CheckpointLoad, c.payload_bytes());
            Ok(c)
        })
        .collect()
}

fn publish(store: &dyn CheckpointStore, group: &mut WorkerGroup, dtype: PayloadDtype) -> Result<()> {
    let ckpt = Checkpoint {
        model_id: group.id(),
        step: group.steps_done(),
        params: group.params().clone(),
        dtype,
    };
    store.publish(&ckpt)?;
    let id = group.id();
    group.ledger_mut().charge(id, ByteCause::CheckpointPublish, ckpt.payload_bytes());
    Ok(())
}

/// Codistillation in deterministic lockstep.
///
/// Groups advance one step at a time in model-id order. At every step `s`
/// divisible by the reload interval, each group first publishes a checkpoint
/// of its parameters at step `s`, then every group reloads its peers' latest
/// checkpoints. From `burn_in` on, each group adds the weighted distillation
/// term against the mean prediction of those peer checkpoints. In
/// `FreshInProcess` mode the teachers are instead a snapshot of the peers'
/// parameters taken at the start of each step, and no checkpoints move.
#[allow(clippy::too_many_arguments)]
pub fn codistill_train(
    config: &CodistillConfig,
    groups: &[GroupConfig],
    arch: Arc<Architecture>,
    shards: &[Shard],
    n_steps: u64,
    store: &dyn CheckpointStore,
    plan: &EvalPlan<'_>,
    run_id: &str,
) -> Result<CodistillOutput> {
    check_inputs(config, groups, shards)?;
    let n = config.n_models;
    let mut workers = groups
        .iter()
        .zip(shards)
        .enumerate()
        .map(|(i, (g, s))| WorkerGroup::new(i as u32, g.clone(), Arc::clone(&arch), s))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = (0..n).map(|i| run_id_for(run_id, i)).collect();
    let started = Instant::now();
    let mut records: Vec<Vec<MetricRecord>> = workers
        .iter()
        .zip(&ids)
        .map(|(w, id)| record(id, w, plan, started).map(|r| vec![r]))
        .collect::<Result<_>>()?;
    let mut teachers: Vec<Vec<Checkpoint>> = vec![Vec::new(); n];
    let mut max_staleness: Option<u64> = None;

    for s in 0..n_steps {
        let stale = config.teacher_mode == TeacherMode::StaleCheckpoint;
        if stale && s % config.reload_interval == 0 {
            for w in workers.iter_mut() {
                publish(store, w, config.payload)?;
            }
            for (i, w) in workers.iter_mut().enumerate() {
                teachers[i] = load_peers(store, i, n, w.ledger_mut())?;
            }
        }
        let loss = config.loss_at(s);
        let active = loss.needs_teacher();
        let snapshot: Vec<Parameters> = if active && !stale {
            workers.iter().map(|w| w.params().clone()).collect()
        } else {
            Vec::new()
        };
        for i in 0..n {
            let teacher = if !active {
                None
            } else if stale {
                let oldest = teachers[i].iter().map(|c| c.step).min().ok_or(Error::MissingCheckpoint(0))?;
                let lag = s - oldest;
                max_staleness = Some(max_staleness.map_or(lag, |m| m.max(lag)));
                Some(Teacher::Ensemble(teachers[i].iter().map(|c| c.params.clone()).collect()))
            } else {
                max_staleness = Some(max_staleness.unwrap_or(0));
                let peers = snapshot.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, p)| p.clone());
                Some(Teacher::Ensemble(peers.collect()))
            };
            let w = &mut workers[i];
            let batches = w.next_batches();
            let value = w.step_with(&batches, &loss, teacher.as_ref())?;
            check_divergence(&ids[i], s, value, &records[i])?;
        }
        if plan.due(s + 1, n_steps) {
            for (i, w) in workers.iter().enumerate() {
                records[i].push(record(&ids[i], w, plan, started)?);
            }
        }
    }

    let mut ledger = CommLedger::new();
    workers.iter().for_each(|w| ledger.merge(w.ledger()));
    Ok(CodistillOutput {
        params: workers.iter().map(|w| w.params().clone()).collect(),
        records,
        ledger,
        max_staleness,
    })
}

/// Codistillation with every group on its own thread, sharing only the
/// checkpoint store. Groups exchange on their own step counts and see
/// whatever peer checkpoint is newest at load time, so results are not
/// bit-reproducible. `FreshInProcess` is not available in this mode.
#[allow(clippy::too_many_arguments)]
pub fn codistill_train_concurrent(
    config: &CodistillConfig,
    groups: &[GroupConfig],
    arch: Arc<Architecture>,
    shards: &[Shard],
    n_steps: u64,
    store: &dyn CheckpointStore,
    plan: &EvalPlan<'_>,
    run_id: &str,
) -> Result<CodistillOutput> {
    check_inputs(config, groups, shards)?;
    if config.teacher_mode != TeacherMode::StaleCheckpoint {
        return Err(Error::InvalidConfig("concurrent mode exchanges checkpoints; use stale_checkpoint".into()));
    }
    let n = config.n_models;
    let workers = groups
        .iter()
        .zip(shards)
        .enumerate()
        .map(|(i, (g, s))| WorkerGroup::new(i as u32, g.clone(), Arc::clone(&arch), s))
        .collect::<Result<Vec<_>>>()?;
    // every group publishes step 0 before anyone loads
    let barrier = Barrier::new(n);
    let started = Instant::now();
    let results: Vec<Result<GroupResult>> =
        std::thread::scope(|scope| {
            let handles: Vec<_> = workers
                .into_iter()
                .enumerate()
                .map(|(i, mut w)| {
                    let barrier = &barrier;
                    let id = run_id_for(run_id, i);
                    scope.spawn(move || {
                        let published = publish(store, &mut w, config.payload);
                        barrier.wait();
                        published?;
                        let mut records = vec![record(&id, &w, plan, started)?];
                        let mut teachers: Vec<Checkpoint> = Vec::new();
                        let mut max_lag: Option<u64> = None;
                        for s in 0..n_steps {
                            if s % config.reload_interval == 0 {
                                if s > 0 {
                                    publish(store, &mut w, config.payload)?;
                                }
                                teachers = load_peers(store, i, n, w.ledger_mut())?;
                            }
                            let loss = config.loss_at(s);
                            let teacher = if loss.needs_teacher() {
                                let oldest = teachers.iter().map(|c| c.step).min().unwrap_or(s);
                                let lag = s.saturating_sub(oldest);
                                max_lag = Some(max_lag.map_or(lag, |m| m.max(lag)));
                                Some(Teacher::Ensemble(teachers.iter().map(|c| c.params.clone()).collect()))
                            } else {
                                None
                            };
                            let batches = w.next_batches();
                            let value = w.step_with(&batches, &loss, teacher.as_ref())?;
                            check_divergence(&id, s, value, &records)?;
                            if plan.due(s + 1, n_steps) {
                                records.push(record(&id, &w, plan, started)?);
                            }
                        }
                        Ok((w.params().clone(), records, w.ledger().clone(), max_lag))
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("group thread panicked")).collect()
        });

    let mut out = CodistillOutput { params: Vec::new(), records: Vec::new(), ledger: CommLedger::new(), max_staleness: None };
    for r in results {
        let (p, recs, ledger, lag) = r?;
        out.params.push(p);
        out.records.push(recs);
        out.ledger.merge(&ledger);
        out.max_staleness = match (out.max_staleness, lag) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
    }
    Ok(out)
}
