//! End-to-end experiment orchestration: cached stages, the leave-one-out
//! oracle and report emission.

mod cache;
mod config;
mod loo;
mod report;
mod run;
mod stages;

pub use cache::{ArtifactStore, StoredFile};
pub use config::{EvalConfig, ExperimentConfig, InfluenceConfig, LooConfig, LooMode, PretrainConfig};
pub use loo::{loo_oracle, ConvexHead, LooOutcome};
pub use report::{emit_report, EvalRow, Report, SkipRecord, StrategyOutcome};
pub use run::{run_experiment, Experiment, Hashed, SeedRun, Selections, Splits};
pub use stages::{EvalScores, SftRun};
