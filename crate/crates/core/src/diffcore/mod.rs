//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is built once through its builder methods, evaluated with
//! [`Graph::forward_eval`] (or [`Graph::forward_with`]), and differentiated
//! with [`Graph::backward`]. The op catalog is deliberately small: exactly
//! what the detector, the validation module and the loss need.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

use thiserror::Error;

pub use gradcheck::{finite_diff_check, finite_diff_check_sampled, relative_error, GradReport, InputError, REL_FLOOR};
pub use graph::{CustomOp, Gradients, Graph, NodeId};
pub(crate) use graph::top_gap;
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch at {node}: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("non-finite value produced by {node}")]
    NonFinite { node: String },
    #[error("input `{name}` is not bound")]
    MissingInput { name: String },
    #[error("backward called before forward")]
    NotEvaluated,
    #[error("{node} is not differentiable: {reason}")]
    NotDifferentiable { node: String, reason: String },
    #[error("{node} is not scalar (shape {shape:?})")]
    NonScalar { node: String, shape: Vec<usize> },
    #[error("{0}")]
    InvalidArgument(String),
}
