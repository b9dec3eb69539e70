pub mod error;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub mod host;
pub mod image;
pub mod attention;
pub mod decoder;
pub mod refiner;
pub mod selector;
pub mod datasets;
pub mod checkpoint;
pub mod heads;
pub mod metrics;
pub mod training;
pub mod pipeline;
pub mod selftest;
