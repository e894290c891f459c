pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiments;
pub mod harness;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
