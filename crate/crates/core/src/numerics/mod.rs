//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod fd;
mod gemm;
mod graph;
mod tensor;

pub use fd::{finite_diff_grad, relative_error};
pub use graph::{Graph, NodeId, Var};
pub use tensor::Tensor;
