//! Minimal reverse-mode tensor engine used by the decoder, heads and losses.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheck};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Activation, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Default epsilon for `layer_norm`.
pub const LAYER_NORM_EPS: f64 = 1e-5;
