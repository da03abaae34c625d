//! Dual-branch change detection network: pyramid Transformer encoders for a
//! DSM and an image, cross-modal fusion, a shared decode space and semantic,
//! height and pseudo-change heads.

pub mod backbone;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod infer;
pub mod nn;
pub mod objective;
pub mod params;
pub mod train;

pub use decoder::{Model, ModelConfig, ModelOutputs, TaskGates};
pub use error::{ModelError, Result};
pub use params::ParamStore;
