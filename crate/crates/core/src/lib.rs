//! Multiclass shape blending for functionally graded microstructures and
//! concurrent two-scale topology optimization.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod blend;
pub mod cli;
pub mod dataset;
pub mod driver;
pub mod error;
pub mod fea;
pub mod field;
pub mod homogenize;
pub mod morphology;
pub mod optim;
pub mod sdf;
pub mod sparse;
pub mod surrogate;

pub use error::{Error, Result};
