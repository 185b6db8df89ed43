//! Multi-agent collaborative perception under a communication budget.
//!
//! Agents observe a synthetic bird's-eye-view world, build feature maps,
//! pick which cells are worth sending (spatially, temporally and by
//! collaborator demand), compress them to codebook indices, exchange them
//! over a lossy, delayed channel, and fuse what they receive with their own
//! features and a motion-compensated history.

pub mod assignment;
pub mod compression;
pub mod error;
pub mod exchange;
pub mod geometry;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod perception;
pub mod scalar;
pub mod scenario;
pub mod tracker;
pub mod utilization;

#[cfg(test)]
mod properties;

pub use error::{Error, Result};
pub use scalar::Real;

/// Double-precision instantiations of the generic types.
pub type Box64 = geometry::RotatedBox<f64>;
pub type FeatureMap64 = perception::FeatureMap<f64>;
pub type Heatmap64 = perception::DenseHeatmap<f64>;
pub type ConfidenceMap64 = perception::ConfidenceMap<f64>;
pub type Detection64 = perception::DetectionBox<f64>;
pub type Perception64 = perception::Perception<f64>;
pub type Track64 = tracker::Track<f64>;
pub type TrackSet64 = tracker::TrackSet<f64>;
pub type Tracker64 = tracker::Tracker<f64>;
pub type SparseFeatureMap64 = compression::SparseFeatureMap<f64>;
pub type DynamicMatrix64 = compression::DynamicMatrix<f64>;
pub type Codebook64 = compression::Codebook<f64>;
pub type CollabFeature64 = utilization::CollabFeature<f64>;
pub type EpisodeResult64 = harness::EpisodeResult<f64>;
