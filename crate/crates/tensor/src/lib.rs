//! Minimal dense-tensor autodiff used by the inpainting and segmentation
//! models. CPU only; convolutions run as im2col + GEMM.

pub mod checkpoint;
mod graph;
pub mod nn;
mod optim;
mod params;
mod real;
mod tensor;

pub use graph::{gelu, gelu_grad, sigmoid, CustomOp, Grads, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{Init, ParamBuilder, ParamId, ParamStore};
pub use real::Real;
pub use tensor::{numel, Tensor};
