#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Cluster job scheduling with task-sampling runtime estimation.
//!
//! The crate models jobs as bags (or chains) of tasks, predicts job sizes
//! either by running a few pilot tasks or from the history of similar jobs,
//! and replays traces through a multi-level-queue scheduler in a
//! deterministic discrete-event simulator.

pub mod bayes;
pub mod domain;
pub mod engine;
pub mod metrics;
pub mod predictors;
pub mod rng;
pub mod scheduler;
pub mod stats;
pub mod traceio;

pub use domain::{
    job_width, DomainError, EventKind, Job, JobFeatures, JobRecord, Placement, Prediction,
    PredictionSource, SamplingMode, SchedulerConfig, SimEvent, SimResult,
};
pub use engine::{run, run_with_history, SimError, Simulation};
pub use predictors::{HistoryEstimator, HistoryStore, PredictError};
pub use scheduler::{queue_index_for, Policy, SchedError, Scheduler};
pub use traceio::{SynthSpec, TraceError};
