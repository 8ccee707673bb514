//! Dense `f32`/`f64` tensors with a tape-based reverse-mode autodiff graph,
//! plus the handful of kernels a small transformer needs.

mod element;
mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod rng;
mod tensor;

pub use element::Element;
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, Var};
pub use kernels::{dropout, layer_norm, mean_pool_time, scaled_dot_attention, softmax};
pub use rng::RngStream;
pub use tensor::Tensor;
