//! Structural likelihood losses for unsupervised domain adaptation of
//! semantic segmentation.
//!
//! A normalizing flow is fitted to source-domain label maps; its negative
//! log-likelihood, plus a pairwise smoothness term, then serves as the
//! unsupervised loss on target-domain predictions.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod error;
pub mod flow;
pub mod gradsuite;
pub mod losses;
pub mod numerics;
pub mod scenegen;
pub mod trainer;
pub mod uds;

pub use error::{Error, Result};
pub use numerics::{Graph, Module, Param, Tensor, Var};
