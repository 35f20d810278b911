//! Numerical building blocks for instruction-driven image editing:
//! hypergraph propagation over feature maps, segmentation losses, image
//! quality metrics, instruction planning and mask compositing.

pub mod compose;
pub mod hypergraph;
pub mod image_io;
pub mod metrics;
pub mod mllm;
pub mod promptist;
pub mod seg_losses;

use std::fmt::{Debug, Display};

/// Float element usable by the hypergraph kernels.
pub trait Scalar:
    num_traits::Float + num_traits::FromPrimitive + ndarray::LinalgScalar + Debug + Display + Send + Sync + 'static
{
}

impl<T> Scalar for T where
    T: num_traits::Float + num_traits::FromPrimitive + ndarray::LinalgScalar + Debug + Display + Send + Sync + 'static
{
}
