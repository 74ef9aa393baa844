//! Finite-population laboratory for expansion-based self-training.
//!
//! Distributions are represented as weighted labeled point clouds. On top of
//! them the crate certifies expansion properties by enumeration, minimizes the
//! pseudolabel and unsupervised objectives exactly over labelings, trains small
//! networks with input-consistency regularization, computes all-layer margins,
//! and checks the denoising and unsupervised-learning inequalities.

// `!(x > 0.0)` guards reject NaN along with out-of-range values; matrix
// code indexes by row and column.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bounds;
pub mod dataspace;
pub mod error;
pub mod expansion;
pub mod linalg;
pub mod nets;
pub mod objectives;
pub mod selftrain;
pub mod stats;

pub use error::{LabError, Result};
