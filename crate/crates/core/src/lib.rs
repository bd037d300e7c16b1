#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cluster;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod models;
pub mod perf;
pub mod solvers;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
