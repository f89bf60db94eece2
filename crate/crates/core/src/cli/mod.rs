//! Run configuration, model files and command-line entry points.

pub mod commands;
pub mod config;
pub mod container;

pub use commands::dispatch;
