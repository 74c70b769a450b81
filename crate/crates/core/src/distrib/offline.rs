use std::sync::Arc;

use super::group::{train_baseline, train_group, EvalPlan, GroupConfig, Teacher, TrainOutput, WorkerGroup};
use crate::data::Shard;
use crate::losses::{CombinedLossSpec, DistillLossKind};
use crate::metrics::{steps_to_target, MetricRecord};
use crate::nn::{Architecture, Parameters};
use crate::{Error, Result};

/// Two-phase distillation: train teachers independently, then train a
/// student against their frozen ensemble.
#[derive(Debug, Clone)]
pub struct OfflineSpec {
    pub teachers: Vec<(GroupConfig, Shard)>,
    pub student: GroupConfig,
    pub student_shard: Shard,
    pub distill: DistillLossKind,
    pub distill_weight: f64,
    pub phase1_steps: u64,
    pub phase2_steps: u64,
}

#[derive(Debug, Clone)]
pub struct OfflineOutput {
    pub student: Parameters,
    pub teachers: Vec<Parameters>,
    /// Per-teacher metric rows.
    pub phase1_records: Vec<Vec<MetricRecord>>,
    /// Student rows; steps count from the start of phase 2.
    pub phase2_records: Vec<MetricRecord>,
    pub phase1_steps: u64,
}

impl OfflineOutput {
    /// Phase-1 steps plus the student's steps to reach `target`, i.e. the
    /// sequential step cost of the whole pipeline.
    pub fn total_steps_to_target(&self, target: f64) -> Option<u64> {
        steps_to_target(&self.phase2_records, target).map(|s| s + self.phase1_steps)
    }
}

pub fn offline_distill(
    spec: &OfflineSpec,
    arch: Arc<Architecture>,
    plan: &EvalPlan<'_>,
    run_id: &str,
) -> Result<OfflineOutput> {
    if spec.teachers.is_empty() {
        return Err(Error::InvalidConfig("offline distillation needs at least one teacher".into()));
    }
    let loss = CombinedLossSpec::distill(spec.distill, spec.distill_weight);
    loss.validate()?;
    let mut teachers = Vec::with_capacity(spec.teachers.len());
    let mut phase1_records = Vec::with_capacity(spec.teachers.len());
    for (i, (cfg, shard)) in spec.teachers.iter().enumerate() {
        let TrainOutput { params, records, .. } =
            train_baseline(cfg, Arc::clone(&arch), shard, spec.phase1_steps, plan, &format!("{run_id}-t{i}"))?;
        teachers.push(params);
        phase1_records.push(records);
    }
    let teacher = Teacher::Ensemble(teachers.clone());
    let group = WorkerGroup::new(0, spec.student.clone(), arch, &spec.student_shard)?;
    let out = train_group(group, spec.phase2_steps, &loss, Some(&teacher), plan, &format!("{run_id}-student"))?;
    Ok(OfflineOutput {
        student: out.params,
        teachers,
        phase1_records,
        phase2_records: out.records,
        phase1_steps: spec.phase1_steps,
    })
}
