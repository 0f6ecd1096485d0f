//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of one forward pass; parameters live
//! in a [`ParamStore`] and enter the tape as leaves via [`Tape::param`].
//! After [`Tape::backward`] the resulting [`Gradients`] are folded back into
//! the store and an [`OptimizerState`] applies the Adam update.
//!
//! Elementwise ops broadcast only scalar-vs-tensor. `exp` saturates its
//! argument at ±50.

mod adam;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, OptimizerState};
pub use params::{Init, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var, EXP_CLAMP};
pub use tensor::Tensor;


