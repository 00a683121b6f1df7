//! Staged training of the shared representation and agent onboarding.

pub mod checkpoint;
pub mod config;
pub mod freeze;
pub mod log;
pub mod models;
pub mod pipeline;

pub use checkpoint::Checkpoint;
pub use config::{AblationFlags, EvalConfig, ExperimentConfig, OptimConfig, StageSteps};
pub use freeze::{verify_frozen, FreezeManifest, FreezeReport};
pub use log::{read_log, JsonlSink, NullSink, StepRecord, StepSink};
pub use models::{Models, Progress};
pub use pipeline::{join_new_agent, pretrain_agent, run_protocol, stage1_negotiate, stage2_adapt, StageReport};
