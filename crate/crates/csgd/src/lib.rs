//! Centripetal SGD: constrain clustered convolutional filters to grow
//! identical during training, then remove the duplicates for a strictly
//! narrower model whose outputs match the original exactly.

pub mod error;
pub mod checkpoint;
pub mod config;
pub mod clustering;
pub mod data;
pub mod optim;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod pipelines;
pub mod tape;
pub mod trim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
