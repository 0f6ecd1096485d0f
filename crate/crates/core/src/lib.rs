//! Temporal point-process modelling of irregular visit sequences: joint
//! prediction of the next visit's time and its medical codes, with classical
//! baselines, a synthetic generator and an evaluation harness.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases at the
//! crate root fix it to `f64`, which is what training and evaluation use.

pub mod autodiff;
pub mod baselines;
pub mod bipartite;
pub mod cascade;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod quadrature;
pub mod rng;
pub mod scalar;
pub mod stats;
pub mod synthgen;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Tensor = autodiff::Tensor<f64>;
pub type ParamStore = autodiff::ParamStore<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type Model = cascade::CascadeModel<f64>;
pub type Prediction = cascade::Prediction<f64>;
pub type IntensityContext = cascade::IntensityContext<f64>;
pub type Trainer = cascade::Trainer<f64>;

