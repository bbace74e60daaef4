//! Minimal dense-tensor substrate with reverse-mode differentiation.

pub mod gradcheck;
pub mod graph;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled};
pub use graph::{Graph, Var, EPS};
pub use tensor::Tensor;
