//! The distributed-training engine.
//!
//! A [`WorkerGroup`] is a set of synchronous data-parallel workers that
//! average gradients every step. Codistillation runs several groups side by
//! side; groups only talk to each other through a [`CheckpointStore`], by
//! publishing their parameters and loading their peers' latest checkpoints
//! every `reload_interval` steps. All traffic is tallied in a [`CommLedger`].

mod codistill;
mod group;
mod ledger;
mod offline;
mod store;

pub use codistill::{
    codistill_train, codistill_train_concurrent, CodistillConfig, CodistillOutput, TeacherMode,
};
pub use group::{
    sync_group_step, train_baseline, EvalPlan, GroupConfig, Teacher, TrainOutput, WorkerGroup,
    DIVERGENCE_THRESHOLD,
};
pub use ledger::{comm_report, ByteCause, ByteCounts, CommLedger, CommModel, CommReport};
pub use offline::{offline_distill, OfflineOutput, OfflineSpec};
pub use store::{Checkpoint, CheckpointStore, DirStore, MemoryStore};
