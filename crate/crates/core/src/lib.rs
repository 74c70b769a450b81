//! Online codistillation.
//!
//! Independent worker groups each train a replica of the same model with
//! synchronous data-parallel SGD. Every few steps the groups exchange
//! parameter checkpoints, and after a burn-in period each replica adds a
//! distillation term pulling its predictions toward the mean prediction of
//! the other replicas' (possibly stale) checkpoints.
//!
//! The crate is organised bottom-up:
//!
//! - [`nn`]: a small MLP with analytic backprop and the checkpoint byte format.
//! - [`losses`]: hard-label cross entropy and the distillation/smoothing terms.
//! - [`optim`]: SGD, Adam and Adagrad.
//! - [`data`]: synthetic and text datasets, sharding and batch streams.
//! - [`distrib`]: worker groups, checkpoint stores, the codistillation loop,
//!   offline distillation and communication accounting.
//! - [`metrics`]: evaluation, steps-to-target, ensembles and prediction churn.
//!
//! All training math is `f64` and every reduction runs in a fixed order, so
//! lockstep runs are bit-reproducible from their seeds.

pub mod data;
pub mod distrib;
mod error;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod seed;

pub use error::{Divergence, Error, Result};
pub use matrix::Matrix;

pub use data::{Dataset, Shard, ShardMode, ShardPlan};
pub use distrib::{
    Checkpoint, CheckpointStore, CodistillConfig, CommLedger, GroupConfig, TeacherMode,
};
pub use losses::{CombinedLossSpec, DistillLossKind, SmoothingKind, TeacherSignal};
pub use metrics::MetricRecord;
pub use nn::{Architecture, Batch, Parameters};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
