//! Frozen specialist encoders composed into one downstream model through
//! band adaptation, per-branch normalization, top-k selection and linear
//! multi-scale fusion.

pub mod autograd;
pub mod bands;
pub mod blob;
pub mod container;
pub mod downstream;
pub mod ensemble;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod plot;
pub mod pruning;
pub mod synthetic;
pub mod tensor;
pub mod training;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::Tensor;
