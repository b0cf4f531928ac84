//! Keypoint signatures for 3D volumes.
//!
//! The pipeline detects difference-of-Gaussians keypoints in each volume,
//! describes them with 64-element rank-ordered gradient histograms, pools
//! every descriptor of a dataset into one approximate nearest-neighbour
//! index, turns cross-image matches into per-pair log-Jaccard distances and
//! flags pairs whose distance is inconsistent with their subject labels.

pub mod cli;
pub mod config;
pub mod curation;
pub mod descriptor;
pub mod detector;
pub mod error;
pub mod formats;
pub mod knn;
pub mod pairwise;
pub mod plot;
pub mod report;
pub mod review;
pub mod volume;

pub use error::{Error, Result};
