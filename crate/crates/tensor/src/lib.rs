//! Dense tensors, tape-based reverse-mode autodiff and the Adam optimizer.
//!
//! Computation runs in `f32`; every op is generic over [`Scalar`] so the same
//! graphs can be evaluated in `f64` when checking gradients.

mod adam;
mod error;
pub mod gradcheck;
mod graph;
mod params;
mod scalar;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{Result, TensorError};
pub use graph::{softmax_rows, Gradients, Graph, Var};
pub use params::{ParamId, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use scalar::Scalar;
pub use tensor::Tensor;
