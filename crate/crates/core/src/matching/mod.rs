//! Dense feature correspondence: geometric (nearest neighbours verified by
//! camera geometry) and semantic (keypoint transfer across instances).

mod correspondence;
mod grid;
mod semantic;

pub use correspondence::*;
pub use grid::FeatureGrid;
pub use semantic::*;
