//! Experiment harness: dataset generation, training with and without
//! denoising queries, instability traces and evaluation.

pub mod commands;
pub mod config;
pub mod evaluate;
pub mod snapshot;

pub use commands::{cmd_eval, cmd_gen, cmd_is, cmd_train};
pub use config::RunConfig;
