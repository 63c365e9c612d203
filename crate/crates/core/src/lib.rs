//! AffinityNet: stacked kNN attention pooling layers for few-shot learning
//! on sets of objects, with a small reverse-mode autodiff engine and the
//! evaluation metrics used around it.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common `f64` instantiations.

pub mod affinity;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod layers;
pub mod metrics;
pub mod ndcore;
pub mod rng;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use ndcore::{Matrix, Tape, Var};
pub use scalar::Scalar;

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Tape64 = Tape<f64>;
pub type ModelParams64 = layers::ModelParams<f64>;
pub type Dataset64 = data::Dataset<f64>;
