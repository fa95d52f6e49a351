//! On-disk formats: feature grids (`.p3df`), dense maps (`.p3dm`), probe
//! checkpoints (`.p3dc`), JSON manifests and metric reports.
//!
//! Binary formats are little-endian throughout; readers bound every
//! declared size by the bytes actually present.

mod binary;
mod checkpoint;
mod dataset;
mod densemap;
mod features;
mod manifest;
mod report;

pub use checkpoint::*;
pub use dataset::ManifestDataset;
pub use densemap::*;
pub use features::*;
pub use manifest::*;
pub use report::*;
