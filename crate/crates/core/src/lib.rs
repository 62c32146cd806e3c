pub mod admm;
pub mod codec;
pub mod entropy;
pub mod error;
pub mod losses;
pub mod nn;
pub mod pipelines;
pub mod quant;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
