pub mod cli;
pub mod cond;
pub mod error;
pub mod evalmetrics;
pub mod monitor;
pub mod nets;
pub mod schema;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod transform;

pub use error::{Error, Result};
