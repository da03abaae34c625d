//! Data side of the DSM-to-image change detection toolkit: synthetic scene
//! generation and annotation, sample construction and normalization, dataset
//! storage, and evaluation metrics.

pub mod datapipe;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod raster;
pub mod synthcity;

pub use error::{Error, Result};
pub use raster::{ClassMap, Mask, Raster, RasterTile};

/// Class codes shared by semantic labels and the pseudo-change encoding.
pub mod classes {
    pub const NUM_CLASSES: usize = 3;

    pub const BACKGROUND: u8 = 0;
    pub const DEMOLISHED: u8 = 1;
    pub const NEWLY_BUILT: u8 = 2;

    pub const UNCHANGED: u8 = 0;
    pub const POSITIVE: u8 = 1;
    pub const NEGATIVE: u8 = 2;
}
