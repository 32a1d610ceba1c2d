pub mod alignment;
pub mod bench;
pub mod blocks;
pub mod data;
pub mod error;
pub mod model;
pub mod probing;
pub mod report;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
