//! Evaluation engine for the 3D awareness of frozen visual features.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod datastore;
pub mod error;
pub mod fixtures;
pub mod geometry;
pub mod matching;
pub mod metrics;
pub mod objectives;
pub mod probes;
pub mod selftest;
pub mod synthetic;
pub mod tensorcore;

pub use analysis::{MetricReport, MetricRow, TaskKey};
pub use datastore::{FeatureFile, Manifest, ManifestItem};
pub use error::{Error, Result};
pub use geometry::{CameraFrame, Intrinsics, Pose};
pub use matching::{FeatureGrid, KeypointSet};
pub use metrics::{DepthMetrics, NormalMetrics};
pub use objectives::{LossConfig, OptimConfig, ProbeMetrics, TrainConfig};
pub use probes::{DenseProbe, DepthRange, ModelFamily, ProbeConfig, ProbeTask};
pub use tensorcore::{Real, Tensor};
