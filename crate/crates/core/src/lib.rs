//! Category query learning for human-object interaction classification.
//!
//! Learnable per-category queries are refined against an image feature grid
//! by a small transformer decoder, then used both for image-level
//! multi-label classification and as adaptive classification weights for
//! human-object instances.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Tape ops return `Result`, so they cannot be the std operator traits.
#![allow(clippy::should_implement_trait)]

pub mod cli;
pub mod decoder;
pub mod error;
pub mod harness;
pub mod interaction;
pub mod losses;
pub mod numcore;

pub use error::{Error, Result};
