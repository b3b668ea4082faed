//! Dense tensors, a reverse-mode tape, and gradient checking.

pub mod functional;
pub mod gradcheck;
pub mod graph;
pub mod real;
pub mod tensor;

pub use functional::{
    attention, binary_cross_entropy, cross_entropy, scaled_dot_attention, sigmoid, softmax,
    Distribution,
};
pub use gradcheck::{grad_check, relative_error, GradChecker};
pub use graph::{Gradients, Graph, OpKind, Var};
pub use real::{Precision, Real};
pub use tensor::Tensor;
