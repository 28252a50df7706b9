#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod admm;
pub mod error;
pub mod gp;
pub mod ilqr;
pub mod path;
pub mod sim;
pub mod vehicle;

pub use error::{DriftError, Result};
