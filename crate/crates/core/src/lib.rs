//! Semi-supervised semantic segmentation with prototype-based consistency
//! regularization, at desk scale.
//!
//! A teacher/student pair of small convolutional networks is trained on a
//! synthetic segmentation task. The teacher's linear head produces
//! confidence-gated pseudo-labels on weakly augmented unlabeled images; the
//! student's linear and prototype heads are fit to those labels on CutMix
//! images. Prototypes are initialized by K-means over warm-up features and
//! maintained by exponential moving average.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for callers that do not care.

pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod protobank;
pub mod rng;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Network32 = model::Network<f32>;
pub type Network64 = model::Network<f64>;
pub type PrototypeBank32 = protobank::PrototypeBank<f32>;
pub type PrototypeBank64 = protobank::PrototypeBank<f64>;
pub type TrainState32 = trainer::TrainState<f32>;
pub type TrainState64 = trainer::TrainState<f64>;
