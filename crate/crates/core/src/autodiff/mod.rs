//! Dense tensor engine with reverse-mode automatic differentiation.

pub mod gradcheck;
pub mod graph;
pub mod kernels;

pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub use graph::{sharpen_scalar, Graph, Op, Var};
pub use kernels::UpsampleMode;
