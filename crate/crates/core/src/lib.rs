//! Drop-to-adapt: unsupervised domain adaptation with adversarial dropout
//! masks at two insertion points of a convolutional classifier.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); mask
//! budgets are exact rationals.

pub mod adversarial;
pub mod datasets;
pub mod error;
pub mod masking;
pub mod networks;
pub mod objectives;
pub mod oracle;
pub mod prob;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{DtaError, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Network32 = networks::Network<f32>;
pub type Network64 = networks::Network<f64>;
