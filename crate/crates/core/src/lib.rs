// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod array;
pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod inference;
pub mod kernels;
pub mod memory;
pub mod model;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use array::Array;
pub use error::{Error, Result};
