//! Trainable models on top of the tensor engine: a segmentation-token
//! reasoning segmenter and a masked-image VAE with hypergraph modules, plus
//! the procedural corpora they train on.

pub mod ops;
pub mod reason_seg;
pub mod synth;
pub mod vae;
pub mod vocab;

use maskfree_tensor::Real;

/// Element type accepted by the models: an engine scalar that the core
/// hypergraph kernels also accept.
pub trait Float: Real + maskfree_core::Scalar {}

impl<T: Real + maskfree_core::Scalar> Float for T {}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Hypergraph(#[from] maskfree_core::hypergraph::HypergraphError),
    #[error(transparent)]
    Loss(#[from] maskfree_core::seg_losses::LossError),
    #[error(transparent)]
    Checkpoint(#[from] maskfree_tensor::checkpoint::CheckpointError),
    #[error("{0}")]
    Query(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;
