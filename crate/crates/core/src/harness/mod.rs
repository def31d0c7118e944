//! The fuzzing loop: schedules of faults, per-step state classification and
//! policy learning, bug oracles, and campaign records on disk.

mod campaign;
mod config;
mod oracles;
mod store;

use thiserror::Error;

pub use campaign::{
    eligible_targets, minimize, replay, reproduce, run, run_baseline_random, run_campaign, steady_summaries,
    CampaignResult, Mode, OracleFinding, RunOptions, Schedule, StepRecord, TriggerRef, WindowOutcome, INIT_STATE,
};
pub use config::{
    Budget, CampaignConfig, ConfigError, LearningConfig, NoveltyConfig, OracleConfig, WorkloadConfig, CONFIG_VERSION,
};
pub use oracles::{Detection, FindingKind, OracleState, WindowObservation};
pub use store::{load_campaign, write_campaign, LoadedCampaign, Manifest, FORMAT_VERSION};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] crate::netsim::SimError),
    #[error(transparent)]
    Timeline(#[from] crate::timeline::TimelineError),
    #[error(transparent)]
    Abstraction(#[from] crate::abstraction::AbstractionError),
    #[error(transparent)]
    Novelty(#[from] crate::novelty::NoveltyError),
    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyError),
    #[error("replay diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },
    #[error("campaign was recorded by {recorded}, this is {current}")]
    VersionMismatch { recorded: String, current: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}
