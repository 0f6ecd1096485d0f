//! Temporal cascade model: time-context vectors, GRU encoder, causal
//! attention over ancestor visits, GRU decoder, code head and an
//! exponential-affine intensity with a closed-form likelihood.

pub mod checkpoint;
pub mod config;
pub mod intensity;
pub mod model;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{AblationConfig, LossWeights, ModelConfig, Variant};
pub use intensity::{nll_with_partials, IntensityContext};
pub use model::{argmax_first, CascadeModel, Forward, Prediction, PROB_FLOOR};
pub use train::{EpochLog, TrainConfig, Trainer};
