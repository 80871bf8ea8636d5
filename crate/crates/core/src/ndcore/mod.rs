//! Minimal dense f64 tensors with reverse-mode automatic differentiation.

pub mod gradcheck;
pub mod graph;
pub mod tensor;

pub use gradcheck::{check_gradients, rel_err, FdReport};
pub use graph::{stack_scalars, EvalGuard, GradMap, Graph, NodeId};
pub use tensor::Tensor;
