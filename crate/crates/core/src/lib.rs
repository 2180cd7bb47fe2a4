//! Building-damage classification from satellite imagery: tensors, a small
//! CNN toolkit, data preparation, training, evaluation and persistence.

pub mod augment;
pub mod datapipe;
pub mod error;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod persist;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
