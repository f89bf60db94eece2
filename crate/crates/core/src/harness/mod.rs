//! Synthetic data, the trainable model, and the experiment harness.

pub mod dataset;
pub mod model;
pub mod optim;
pub mod train;
pub mod eval;
pub mod density;
pub mod compare;
