//! Experiment runners: each kind trains a fixed set of runs per seed.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use codistill_core::data::{gen_classification, ingest_text, make_shards, unigram, ClassificationSpec};
use codistill_core::distrib::{
    codistill_train, codistill_train_concurrent, comm_report, offline_distill, train_baseline, CodistillOutput,
    CommModel, CommReport, DirStore, EvalPlan, MemoryStore, OfflineSpec, TrainOutput,
};
use codistill_core::metrics::{best_val_loss, churn_experiment, ensemble_predict, eval_with, steps_to_target, ChurnReport};
use codistill_core::{
    seed, Architecture, CheckpointStore, CodistillConfig, CombinedLossSpec, Dataset, Error, GroupConfig,
    MetricRecord, OptimizerConfig, Parameters, Shard, ShardMode, SmoothingKind, TeacherMode,
};
use serde::Serialize;

use crate::config::{DataKind, ExperimentConfig, ExperimentKind, RunMode};
use crate::CliError;

/// Training and validation data for one seed.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub train: Arc<Dataset>,
    pub validation: Arc<Dataset>,
    pub arch: Arc<Architecture>,
}

/// Generates (or ingests) the dataset for `seed` and holds out the validation split.
pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<SeedData, CliError> {
    let d = &cfg.data;
    let full = match d.kind {
        DataKind::Classification => {
            let mut spec = ClassificationSpec::new(seed, d.n_examples, d.input_dim, d.n_classes, d.difficulty);
            spec.label_noise = d.label_noise;
            gen_classification(&spec)?
        }
        DataKind::Text => {
            let path = d.path.as_ref().ok_or_else(|| CliError::config("data.path", "missing"))?;
            ingest_text(path, d.context_window)?
        }
    };
    let (train, validation) = full.split_validation(d.validation_fraction, seed::derive(seed, "split", 0))?;
    let arch = match d.kind {
        DataKind::Classification => Architecture::classifier(d.input_dim, cfg.model.hidden.clone(), d.n_classes)?,
        DataKind::Text => Architecture::language_model(
            d.context_window,
            full.n_classes(),
            cfg.model.embedding_dim,
            cfg.model.hidden.clone(),
        )?,
    };
    Ok(SeedData { train: Arc::new(train), validation: Arc::new(validation), arch: Arc::new(arch) })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub role: String,
    pub seed: u64,
    /// Codistillation member index; 0 for single-model runs.
    pub member: usize,
    pub final_val_loss: f64,
    pub best_val_loss: f64,
    pub final_val_accuracy: f64,
    pub target: Option<f64>,
    /// First evaluated step at or below `target`. For the offline pipeline
    /// this includes the teacher phase.
    pub steps_to_target: Option<u64>,
    /// Steps added to `steps_to_target` (offline teacher phase).
    #[serde(skip)]
    pub step_offset: u64,
    #[serde(skip)]
    pub records: Vec<MetricRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoleMean {
    pub runs: usize,
    pub final_val_loss: f64,
    pub best_val_loss: f64,
    pub final_val_accuracy: f64,
    pub reached_target: usize,
    pub mean_steps_to_target: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChurnComparison {
    pub baseline: ChurnReport,
    pub codistill: ChurnReport,
    /// `1 - codistill churn / baseline churn`.
    pub relative_reduction: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ExperimentReport {
    pub kind: String,
    pub seeds: Vec<u64>,
    pub provenance: Vec<String>,
    pub runs: Vec<RunSummary>,
    /// Means over seeds per role; codistillation counts member 0 only.
    pub roles: BTreeMap<String, RoleMean>,
    pub comm: Option<CommReport>,
    pub max_staleness: Option<u64>,
    pub churn: Option<ChurnComparison>,
    #[serde(skip)]
    pub records: Vec<MetricRecord>,
    /// Final parameters by run id.
    #[serde(skip)]
    pub models: BTreeMap<String, Parameters>,
}

impl ExperimentReport {
    pub fn role_runs<'a>(&'a self, role: &'a str) -> impl Iterator<Item = &'a RunSummary> + 'a {
        self.runs.iter().filter(move |r| r.role == role && r.member == 0)
    }

    pub fn run(&self, role: &str, seed: u64) -> Option<&RunSummary> {
        self.runs.iter().find(|r| r.role == role && r.member == 0 && r.seed == seed)
    }
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    checkpoint_root: Option<PathBuf>,
    report: ExperimentReport,
}

fn summarize(run_id: &str, role: &str, seed: u64, member: usize, records: Vec<MetricRecord>) -> RunSummary {
    let last = records.last().expect("a run always records its initial evaluation");
    RunSummary {
        run_id: run_id.to_string(),
        role: role.to_string(),
        seed,
        member,
        final_val_loss: last.val_loss,
        best_val_loss: best_val_loss(&records).expect("non-empty"),
        final_val_accuracy: last.val_accuracy,
        target: None,
        steps_to_target: None,
        step_offset: 0,
        records,
    }
}

impl Runner<'_> {
    fn plan<'d>(&self, data: &'d SeedData) -> EvalPlan<'d> {
        EvalPlan { validation: &data.validation, every: self.cfg.eval_every }
    }

    fn group(&self, model_seed: u64, data_seed: u64, n_workers: usize) -> GroupConfig {
        let o = &self.cfg.optim;
        let optimizer = OptimizerConfig {
            kind: o.kind,
            learning_rate: o.learning_rate,
            beta1: o.beta1,
            beta2: o.beta2,
            adam_eps: o.adam_eps,
            adagrad_eps: o.adagrad_eps,
        };
        let mut g = GroupConfig::new(n_workers, self.cfg.group.per_worker_batch, optimizer, model_seed);
        g.data_seed = Some(data_seed);
        g
    }

    /// Group `g` of the run family rooted at `base`.
    fn member_group(&self, base: u64, g: usize, mode: ShardMode) -> GroupConfig {
        let stream = match mode {
            ShardMode::Disjoint => g as u64,
            ShardMode::Shared => 0,
        };
        self.group(
            seed::derive(base, "group", g as u64),
            seed::derive(base, "stream", stream),
            self.cfg.group.n_workers,
        )
    }

    fn keep(&mut self, summary: RunSummary, params: Parameters) {
        self.report.records.extend(summary.records.iter().cloned());
        self.report.models.insert(summary.run_id.clone(), params);
        self.report.runs.push(summary);
    }

    fn diverged(&mut self, err: Error) -> CliError {
        if let Error::Diverged(d) = &err {
            self.report.records.extend(d.records.iter().cloned());
        }
        CliError::Core(err)
    }

    fn baseline(
        &mut self,
        data: &SeedData,
        role: &str,
        run_id: String,
        seed: u64,
        config: &GroupConfig,
    ) -> Result<TrainOutput, CliError> {
        let plan = self.plan(data);
        let out = train_baseline(config, Arc::clone(&data.arch), &Shard::full(Arc::clone(&data.train)), self.cfg.steps, &plan, &run_id)
            .map_err(|e| self.diverged(e))?;
        self.keep(summarize(&run_id, role, seed, 0, out.records.clone()), out.params.clone());
        Ok(out)
    }

    fn codistill_config(&self) -> CodistillConfig {
        let c = &self.cfg.codistill;
        CodistillConfig {
            n_models: c.n_models,
            burn_in: c.burn_in,
            reload_interval: c.reload_interval,
            distill: c.distill,
            distill_weight: c.distill_weight,
            teacher_mode: c.teacher_mode,
            data_mode: c.data_mode,
            payload: c.payload,
            ramp_steps: c.ramp_steps,
        }
    }

    /// Trains one codistillation family rooted at `base` and records every member.
    fn codistill(
        &mut self,
        data: &SeedData,
        config: &CodistillConfig,
        role: &str,
        run_id: String,
        seed: u64,
        base: u64,
    ) -> Result<CodistillOutput, CliError> {
        let n = config.n_models;
        let plan = make_shards(data.train.len(), config.data_mode, n, seed::derive(base, "shards", 0))?;
        let shards = Shard::from_plan(&data.train, &plan)?;
        let groups: Vec<GroupConfig> = (0..n).map(|g| self.member_group(base, g, config.data_mode)).collect();
        let eval = self.plan(data);
        let arch = Arc::clone(&data.arch);
        let result = match self.cfg.mode {
            RunMode::Lockstep => {
                let store = MemoryStore::new(Arc::clone(&arch));
                codistill_train(config, &groups, arch, &shards, self.cfg.steps, &store, &eval, &run_id)
            }
            RunMode::Concurrent => {
                let root = self.checkpoint_root.clone().unwrap_or_else(std::env::temp_dir);
                let store = DirStore::new(root.join(&run_id), Arc::clone(&arch))?;
                let store: &dyn CheckpointStore = &store;
                codistill_train_concurrent(config, &groups, arch, &shards, self.cfg.steps, store, &eval, &run_id)
            }
        };
        let out = result.map_err(|e| self.diverged(e))?;
        for (m, (records, params)) in out.records.iter().zip(&out.params).enumerate() {
            self.keep(summarize(&format!("{run_id}-m{m}"), role, seed, m, records.clone()), params.clone());
        }
        if self.report.comm.is_none() && config.teacher_mode == TeacherMode::StaleCheckpoint {
            let model = CommModel {
                n_workers: self.cfg.group.n_workers,
                n_models: n,
                reload_interval: config.reload_interval,
                payload: config.payload,
                n_steps: self.cfg.steps,
            };
            self.report.comm = Some(comm_report(&out.ledger, data.arch.param_count() as u64, &model));
        }
        if let Some(s) = out.max_staleness {
            self.report.max_staleness = Some(self.report.max_staleness.map_or(s, |m| m.max(s)));
        }
        Ok(out)
    }

    fn run_seed(&mut self, seed: u64) -> Result<(), CliError> {
        let data = prepare_data(self.cfg, seed)?;
        if self.report.provenance.is_empty() {
            self.report.provenance.push(format!("dataset: {}", data.train.provenance()));
        }
        let kind = self.cfg.kind;
        let id = |role: &str| format!("{role}-s{seed}");
        let base_group = self.member_group(seed, 0, ShardMode::Disjoint);
        let cd = self.codistill_config();

        if kind != ExperimentKind::BatchSweep {
            self.baseline(&data, "baseline", id("baseline"), seed, &base_group)?;
        }
        match kind {
            ExperimentKind::Baseline => {}
            ExperimentKind::BatchSweep => {
                for &w in &self.cfg.batch_sweep_workers.clone() {
                    let mut g = base_group.clone();
                    g.n_workers = w;
                    let role = format!("w{w}");
                    self.baseline(&data, &role, id(&role), seed, &g)?;
                }
            }
            ExperimentKind::Codistill => {
                self.codistill(&data, &cd, "codistill", id("codistill"), seed, seed)?;
            }
            ExperimentKind::SameDataAblation => {
                let mut disjoint = cd.clone();
                disjoint.data_mode = ShardMode::Disjoint;
                self.codistill(&data, &disjoint, "codistill", id("codistill"), seed, seed)?;
                let mut shared = cd.clone();
                shared.data_mode = ShardMode::Shared;
                self.codistill(&data, &shared, "codistill_shared", id("codistill_shared"), seed, seed)?;
            }
            ExperimentKind::StalenessSweep => {
                let mut fresh = cd.clone();
                fresh.teacher_mode = TeacherMode::FreshInProcess;
                fresh.reload_interval = 1;
                self.codistill(&data, &fresh, "fresh", id("fresh"), seed, seed)?;
                for &r in &self.cfg.staleness_intervals.clone() {
                    let mut stale = cd.clone();
                    stale.teacher_mode = TeacherMode::StaleCheckpoint;
                    stale.reload_interval = r;
                    let role = format!("r{r}");
                    self.codistill(&data, &stale, &role, id(&role), seed, seed)?;
                }
            }
            ExperimentKind::SmoothingBaseline => {
                let kinds = [
                    ("smooth_uniform", SmoothingKind::Uniform),
                    ("smooth_unigram", SmoothingKind::unigram(unigram(&data.train))?),
                ];
                for (role, smoothing) in kinds {
                    let mut g = base_group.clone();
                    g.loss = CombinedLossSpec::smoothed(smoothing, self.cfg.smoothing_weight);
                    self.baseline(&data, role, id(role), seed, &g)?;
                }
                self.codistill(&data, &cd, "codistill", id("codistill"), seed, seed)?;
            }
            ExperimentKind::EnsembleBaseline => {
                let mut members = Vec::new();
                for g in 0..cd.n_models {
                    let config = self.member_group(seed, g, ShardMode::Disjoint);
                    let out = if g == 0 {
                        self.report.models[&id("baseline")].clone()
                    } else {
                        let role = format!("member{g}");
                        self.baseline(&data, &role, id(&role), seed, &config)?.params
                    };
                    members.push(out);
                }
                let e = eval_with(&data.validation, |b| ensemble_predict(&members, b))?;
                let record = MetricRecord {
                    run_id: id("ensemble"),
                    step: self.cfg.steps,
                    wall_seconds: 0.0,
                    train_loss: None,
                    val_loss: e.cross_entropy,
                    val_accuracy: e.accuracy,
                    bytes_grad_exchange: 0,
                    bytes_checkpoint: 0,
                };
                let summary = summarize(&id("ensemble"), "ensemble", seed, 0, vec![record]);
                self.report.runs.push(summary);
                self.codistill(&data, &cd, "codistill", id("codistill"), seed, seed)?;
            }
            ExperimentKind::OfflineDistill => {
                self.codistill(&data, &cd, "codistill", id("codistill"), seed, seed)?;
                let full = Shard::full(Arc::clone(&data.train));
                let teachers = (0..cd.n_models)
                    .map(|g| {
                        let mut t = self.member_group(seed, g, ShardMode::Disjoint);
                        t.seed = seed::derive(seed, "teacher", g as u64);
                        (t, full.clone())
                    })
                    .collect();
                let student = self.group(
                    seed::derive(seed, "student", 0),
                    seed::derive(seed, "student-stream", 0),
                    self.cfg.group.n_workers,
                );
                let spec = OfflineSpec {
                    teachers,
                    student,
                    student_shard: full,
                    distill: cd.distill,
                    distill_weight: cd.distill_weight,
                    phase1_steps: self.cfg.offline_phase1_steps,
                    phase2_steps: self.cfg.offline_phase2_steps,
                };
                let plan = self.plan(&data);
                let run_id = id("offline");
                let out = offline_distill(&spec, Arc::clone(&data.arch), &plan, &run_id).map_err(|e| self.diverged(e))?;
                for (t, (records, params)) in out.phase1_records.iter().zip(&out.teachers).enumerate() {
                    let run = format!("{run_id}-t{t}");
                    self.keep(summarize(&run, "offline_teacher", seed, t, records.clone()), params.clone());
                }
                let mut student = summarize(&format!("{run_id}-student"), "offline", seed, 0, out.phase2_records);
                student.step_offset = out.phase1_steps;
                self.keep(student, out.student);
            }
            ExperimentKind::Churn => unreachable!("churn runs across seeds"),
        }
        Ok(())
    }

    fn run_churn(&mut self, seed: u64) -> Result<(), CliError> {
        let data = prepare_data(self.cfg, seed)?;
        self.report.provenance.push(format!("dataset: {}", data.train.provenance()));
        let cd = self.codistill_config();
        let repeats = self.cfg.churn_repeats;
        let baseline = churn_experiment(repeats, &data.validation, |r| {
            let base = seed::derive(seed, "retrain", r as u64);
            let g = self.member_group(base, 0, ShardMode::Disjoint);
            Ok(self.baseline(&data, "churn_baseline", format!("churn_baseline-s{seed}-r{r}"), seed, &g)
                .map_err(CliError::into_core)?
                .params)
        })
        .map_err(CliError::Core)?;
        let codistill = churn_experiment(repeats, &data.validation, |r| {
            let base = seed::derive(seed, "retrain", r as u64);
            let out = self
                .codistill(&data, &cd, "churn_codistill", format!("churn_codistill-s{seed}-r{r}"), seed, base)
                .map_err(CliError::into_core)?;
            Ok(out.params[0].clone())
        })
        .map_err(CliError::Core)?;
        let relative_reduction = 1.0 - codistill.churn.mean / baseline.churn.mean;
        self.report.churn = Some(ChurnComparison { baseline, codistill, relative_reduction });
        Ok(())
    }

    /// Fills in targets and steps-to-target once all runs of a seed exist.
    fn resolve_targets(&mut self) {
        let seeds = self.report.seeds.clone();
        for seed in seeds {
            let target = self.cfg.target_loss.or_else(|| match self.cfg.kind {
                ExperimentKind::BatchSweep => self
                    .report
                    .runs
                    .iter()
                    .filter(|r| r.seed == seed)
                    .map(|r| r.best_val_loss)
                    .reduce(f64::max),
                ExperimentKind::Churn => None,
                _ => self.report.run("baseline", seed).map(|r| r.best_val_loss),
            });
            let Some(target) = target else { continue };
            for run in self.report.runs.iter_mut().filter(|r| r.seed == seed && r.role != "ensemble") {
                run.target = Some(target);
                run.steps_to_target = steps_to_target(&run.records, target).map(|s| s + run.step_offset);
            }
        }
    }

    fn aggregate_roles(&mut self) {
        let mut roles: BTreeMap<String, Vec<&RunSummary>> = BTreeMap::new();
        for r in self.report.runs.iter().filter(|r| r.member == 0) {
            roles.entry(r.role.clone()).or_default().push(r);
        }
        self.report.roles = roles
            .into_iter()
            .map(|(role, runs)| {
                let n = runs.len() as f64;
                let reached: Vec<f64> = runs.iter().filter_map(|r| r.steps_to_target).map(|s| s as f64).collect();
                let mean = RoleMean {
                    runs: runs.len(),
                    final_val_loss: runs.iter().map(|r| r.final_val_loss).sum::<f64>() / n,
                    best_val_loss: runs.iter().map(|r| r.best_val_loss).sum::<f64>() / n,
                    final_val_accuracy: runs.iter().map(|r| r.final_val_accuracy).sum::<f64>() / n,
                    reached_target: reached.len(),
                    mean_steps_to_target: (!reached.is_empty())
                        .then(|| reached.iter().sum::<f64>() / reached.len() as f64),
                };
                (role, mean)
            })
            .collect();
    }
}

/// Runs an experiment in memory. On failure the returned error carries every
/// metric row recorded before the failure.
pub fn execute(cfg: &ExperimentConfig, checkpoint_root: Option<PathBuf>) -> Result<ExperimentReport, Failure> {
    cfg.validate().map_err(|e| Failure { error: e, records: Vec::new() })?;
    let mut runner = Runner {
        cfg,
        checkpoint_root,
        report: ExperimentReport { kind: cfg.kind.to_string(), seeds: cfg.seeds.clone(), ..Default::default() },
    };
    let result = if cfg.kind == ExperimentKind::Churn {
        runner.report.seeds.truncate(1);
        runner.run_churn(cfg.seeds[0])
    } else {
        cfg.seeds.iter().try_for_each(|&s| runner.run_seed(s))
    };
    match result {
        Ok(()) => {
            runner.resolve_targets();
            runner.aggregate_roles();
            Ok(runner.report)
        }
        Err(error) => Err(Failure { error, records: runner.report.records }),
    }
}

/// An aborted experiment and the metrics it produced so far.
#[derive(Debug)]
pub struct Failure {
    pub error: CliError,
    pub records: Vec<MetricRecord>,
}
