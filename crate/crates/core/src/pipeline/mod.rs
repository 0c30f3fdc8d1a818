//! Synthetic data, orchestration of the end-to-end run, configuration and plots.

pub mod config;
pub mod mock;
pub mod plot;
pub mod run;
pub mod synthetic;

pub use config::{Generator, PipelineConfig};
pub use run::{artifact, run_pipeline, run_stage, Stage};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {cause}")]
    Stage { stage: &'static str, cause: String },
}
