//! Dense tensors, a reverse-mode tape and a finite-difference checker.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport, REL_FLOOR};
pub use graph::{Graph, Var};
pub use tensor::Tensor;

pub(crate) use tensor::dot;
