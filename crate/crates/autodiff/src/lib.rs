//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records primitive operations as they are applied and
//! [`Graph::backward`] runs one reverse sweep from a scalar loss.
//! Complex matrices are stored as real tensors with a leading axis of
//! length 2 holding the real and imaginary parts.

mod check;
mod error;
mod graph;
mod tensor;

pub use check::{grad_check, relative_error, GradCheckOptions, GradCheckReport};
pub use error::{AutodiffError, Result};
pub use graph::{Graph, OpKind, Var};
pub use tensor::Tensor;

/// Exact GELU, `x * Phi(x)`, on a plain value.
pub fn gelu(x: f64) -> f64 {
    graph::gelu_scalar(x)
}
