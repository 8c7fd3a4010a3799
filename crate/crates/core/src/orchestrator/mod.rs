//! Training orchestration: launches environments, collects experience,
//! updates the policy and evaluates it.

pub mod benchmark;
pub mod config;
pub mod eval;
pub mod launcher;
pub mod sampler;
pub mod train;

pub use config::{ConfigError, RunConfig, SamplerKind};
pub use train::{train_run, TrainError, TrainSummary};
