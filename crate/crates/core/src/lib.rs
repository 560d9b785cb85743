pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod flops;
pub mod model;
pub mod sparsity;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{DType, Real, Tensor};
