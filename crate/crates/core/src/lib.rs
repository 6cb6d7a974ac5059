//! Convolutional network engine for thin-smear blood cell classification:
//! tensors, differentiable layers, the architecture zoo, training with Adam,
//! data ingestion and evaluation metrics.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
pub use graph::Model;
pub use tensor::Tensor;
