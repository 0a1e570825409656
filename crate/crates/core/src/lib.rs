//! Representation norm amplification for OOD detection under class imbalance.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod scoring;
pub mod training;

pub use error::{Result, RnaError};
pub use scalar::Scalar;

pub type ModelF32 = model::ModelBundle<f32>;
pub type ModelF64 = model::ModelBundle<f64>;
pub type DatasetF32 = data::DatasetBundle<f32>;
pub type DatasetF64 = data::DatasetBundle<f64>;
