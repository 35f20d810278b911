//! Instruction-driven editing: plan the edit, locate the region, inpaint it
//! and composite the result. Also hosts benchmark evaluation and ablations.

pub mod ablation;
pub mod config;
pub mod edit;
pub mod evaluate;
pub mod resample;

pub use config::PipelineConfig;
pub use edit::{EditOutcome, MaskSource, Pipeline, RunArtifact};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{stage} stage failed: {message}")]
    Stage { stage: &'static str, message: String },
    #[error(transparent)]
    Model(#[from] maskfree_models::ModelError),
    #[error(transparent)]
    Image(#[from] maskfree_core::image_io::ImageError),
    #[error(transparent)]
    Benchmark(#[from] maskfree_core::metrics::BenchmarkError),
    #[error(transparent)]
    Metric(#[from] maskfree_core::metrics::MetricError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;
