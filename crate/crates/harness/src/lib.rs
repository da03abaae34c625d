//! Dataset generation, training, evaluation, ablation and temperature sweeps
//! for the multimodal change detection model.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
