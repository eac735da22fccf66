pub mod cntk;
pub mod data;
pub mod error;
pub mod experiments;
pub mod fc;
pub mod finite;
pub mod kernel_file;
pub mod kernel_matrix;
pub mod pipeline;
pub mod regression;
pub mod relu;
pub mod tensor;

pub use error::{Error, Result};
