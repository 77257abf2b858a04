//! Dense tensors, a reverse-mode tape over them, and the finite-difference
//! oracle used to validate it.

pub mod bten;
pub mod gradcheck;
pub mod graph;
pub(crate) mod kernels;
pub mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_module, relative_error};
pub use graph::{Gradients, Graph, Module, Param, Primitive, Var};
pub use tensor::Tensor;
