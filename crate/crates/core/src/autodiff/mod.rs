//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Build a [`Graph`] per forward pass: register parameters with
//! [`Graph::param`], inputs with [`Graph::constant`], chain ops, then call
//! [`Graph::backward`] on the scalar loss and read gradients with
//! [`Graph::grad`].

mod adam;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState, StepReport};
pub use graph::{Graph, Var};
pub use tensor::Tensor;

/// Default epsilon for [`Graph::layer_norm_rows`].
pub const LAYER_NORM_EPS: f64 = 1e-5;
