//! Dense `f64` tensors and a reverse-mode autodiff tape.

mod graph;
mod tensor;

pub use graph::{logistic, Gradients, Graph, Var};
pub use tensor::Tensor;

/// Layer-norm epsilon used throughout the model family.
pub const LN_EPS: f64 = 1e-5;
