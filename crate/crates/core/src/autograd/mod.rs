//! Minimal dense tensors with reverse-mode differentiation.

mod conv;
mod graph;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::{gemm, Real, Tensor};
