use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::nn::PayloadDtype;

/// Why bytes moved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ByteCause {
    /// A worker sending its gradient into the group allreduce.
    GradientExchange,
    /// A worker receiving the reduced update.
    ParamBroadcast,
    CheckpointPublish,
    CheckpointLoad,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteCounts {
    pub gradient_exchange: u64,
    pub param_broadcast: u64,
    pub checkpoint_publish: u64,
    pub checkpoint_load: u64,
}

impl ByteCounts {
    pub fn sent(&self) -> u64 {
        self.gradient_exchange + self.checkpoint_publish
    }

    pub fn received(&self) -> u64 {
        self.param_broadcast + self.checkpoint_load
    }

    /// In-group synchronous SGD traffic.
    pub fn sgd(&self) -> u64 {
        self.gradient_exchange + self.param_broadcast
    }

    /// Cross-group checkpoint traffic.
    pub fn checkpoint(&self) -> u64 {
        self.checkpoint_publish + self.checkpoint_load
    }

    fn add(&mut self, other: &ByteCounts) {
        self.gradient_exchange += other.gradient_exchange;
        self.param_broadcast += other.param_broadcast;
        self.checkpoint_publish += other.checkpoint_publish;
        self.checkpoint_load += other.checkpoint_load;
    }
}

/// Logical byte counters per entity (worker group / model id).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    entities: BTreeMap<u32, ByteCounts>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn charge(&mut self, entity: u32, cause: ByteCause, bytes: u64) {
        let c = self.entities.entry(entity).or_default();
        let slot = match cause {
            ByteCause::GradientExchange => &mut c.gradient_exchange,
            ByteCause::ParamBroadcast => &mut c.param_broadcast,
            ByteCause::CheckpointPublish => &mut c.checkpoint_publish,
            ByteCause::CheckpointLoad => &mut c.checkpoint_load,
        };
        *slot += bytes;
    }

    pub fn entity(&self, entity: u32) -> ByteCounts {
        self.entities.get(&entity).copied().unwrap_or_default()
    }

    pub fn entities(&self) -> impl Iterator<Item = (u32, ByteCounts)> + '_ {
        self.entities.iter().map(|(&k, &v)| (k, v))
    }

    pub fn totals(&self) -> ByteCounts {
        let mut t = ByteCounts::default();
        self.entities.values().for_each(|c| t.add(c));
        t
    }

    pub fn merge(&mut self, other: &CommLedger) {
        for (id, c) in &other.entities {
            self.entities.entry(*id).or_default().add(c);
        }
    }
}

/// Shape of a run, for the closed-form communication model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommModel {
    pub n_workers: usize,
    /// Number of codistilling groups (1 for plain synchronous SGD).
    pub n_models: usize,
    pub reload_interval: u64,
    pub payload: PayloadDtype,
    pub n_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommReport {
    pub param_count: u64,
    /// Bytes of one full-precision gradient or parameter vector.
    pub param_bytes: u64,
    /// Bytes of one checkpoint payload.
    pub checkpoint_bytes: u64,
    /// Allreduce traffic of one group per step, `2 W param_bytes`.
    pub sgd_bytes_per_step: f64,
    /// Checkpoint traffic of one group per step, `N checkpoint_bytes / R`
    /// (one publish plus `N - 1` loads every `R` steps).
    pub overlay_bytes_per_step: f64,
    /// `sgd_bytes_per_step / overlay_bytes_per_step`.
    pub sgd_to_overlay_ratio: f64,
    /// Closed-form whole-run totals over all groups.
    pub expected_sgd_total: u64,
    pub expected_checkpoint_total: u64,
    pub observed_sgd_total: u64,
    pub observed_checkpoint_total: u64,
}

impl CommReport {
    pub fn ledger_matches(&self) -> bool {
        self.expected_sgd_total == self.observed_sgd_total
            && self.expected_checkpoint_total == self.observed_checkpoint_total
    }
}

/// Number of checkpoint exchanges in a run: one at every step divisible by `R`.
pub fn exchanges(n_steps: u64, reload_interval: u64) -> u64 {
    n_steps.div_ceil(reload_interval)
}

pub fn comm_report(ledger: &CommLedger, param_count: u64, model: &CommModel) -> CommReport {
    let w = model.n_workers as u64;
    let n = model.n_models as u64;
    let param_bytes = param_count * 8;
    let checkpoint_bytes = param_count * model.payload.bytes_per_value() as u64;
    let sgd_bytes_per_step = (2 * w * param_bytes) as f64;
    let overlay_bytes_per_step = if n > 1 {
        (n * checkpoint_bytes) as f64 / model.reload_interval as f64
    } else {
        0.0
    };
    let expected_checkpoint_total = if n > 1 {
        exchanges(model.n_steps, model.reload_interval) * n * n * checkpoint_bytes
    } else {
        0
    };
    let totals = ledger.totals();
    CommReport {
        param_count,
        param_bytes,
        checkpoint_bytes,
        sgd_bytes_per_step,
        overlay_bytes_per_step,
        // exact when the byte counts divide evenly
        sgd_to_overlay_ratio: if n > 1 {
            (2 * w * param_bytes * model.reload_interval) as f64 / (n * checkpoint_bytes) as f64
        } else {
            f64::INFINITY
        },
        expected_sgd_total: n * model.n_steps * 2 * w * param_bytes,
        expected_checkpoint_total,
        observed_sgd_total: totals.sgd(),
        observed_checkpoint_total: totals.checkpoint(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_example() {
        let model = CommModel {
            n_workers: 4,
            n_models: 2,
            reload_interval: 50,
            payload: PayloadDtype::F64,
            n_steps: 0,
        };
        let r = comm_report(&CommLedger::new(), 1_000_000, &model);
        assert_eq!(r.sgd_bytes_per_step, 64e6);
        assert_eq!(r.overlay_bytes_per_step, 0.32e6);
        assert_eq!(r.sgd_to_overlay_ratio, 200.0);
    }

    #[test]
    fn ledger_sums_by_cause() {
        let mut l = CommLedger::new();
        l.charge(0, ByteCause::GradientExchange, 10);
        l.charge(0, ByteCause::ParamBroadcast, 10);
        l.charge(1, ByteCause::CheckpointLoad, 5);
        l.charge(1, ByteCause::CheckpointPublish, 7);
        assert_eq!(l.entity(0).sent(), 10);
        assert_eq!(l.entity(1).received(), 5);
        let t = l.totals();
        assert_eq!((t.sgd(), t.checkpoint()), (20, 12));
        let mut m = CommLedger::new();
        m.merge(&l);
        m.merge(&l);
        assert_eq!(m.totals().sgd(), 40);
    }

    #[test]
    fn exchange_count() {
        assert_eq!(exchanges(0, 5), 0);
        assert_eq!(exchanges(1, 5), 1);
        assert_eq!(exchanges(10, 5), 2);
        assert_eq!(exchanges(11, 5), 3);
    }
}
