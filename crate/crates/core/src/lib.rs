//! Contrastive unsupervised domain adaptation for time series via
//! cross-domain temporal mixup.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checking); the aliases below name the concrete instantiations.

pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod mixup;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod substrate;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = substrate::Tensor<f32>;
pub type Tensor64 = substrate::Tensor<f64>;
pub type ParamStore32 = substrate::ParamStore<f32>;
pub type ParamStore64 = substrate::ParamStore<f64>;
