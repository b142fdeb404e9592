pub mod cli;
pub mod error;
pub mod flops;
pub mod geometry;
pub mod harness;
pub mod models;
pub mod scaling;
pub mod scenegen;
pub mod tensor;

pub use error::{Error, Result};
