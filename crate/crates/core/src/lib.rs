pub mod codec;
pub mod engine;
pub mod entropy;
pub mod error;
pub mod format;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod pruner;
pub mod quantizer;
pub mod tensor;
pub mod watermark;

pub use error::{Error, Result};
pub use tensor::Tensor;
