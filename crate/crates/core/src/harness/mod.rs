//! Configuration, orchestration, persistence and the reproduction suites.

mod config;
pub mod experiments;
pub mod fixture;
mod pipeline;
mod reproduce;

pub use config::{
    load_config, DataConfig, ExperimentConfig, PartitionConfig, PretrainConfig, ProbeConfig,
};
pub use pipeline::{
    cmd_distill, cmd_eval, cmd_metrics, cmd_partition, cmd_train, eval_state, load_checkpoint,
    read_round_log, replay_state, write_atomic, DistillSummary, EvalSummary, Manifest,
    PartitionSummary, RunArtifacts, TrainSummary,
};
pub use reproduce::{
    cmd_reproduce, run_suite, write_verdict_csv, Suite, SuiteOutcome, Verdict, SWEEP_ALPHAS,
    VERDICT_CSV_HEADER,
};
