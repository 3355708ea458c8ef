//! Core algorithms for GNSS-free hierarchical map-matching localization.
//!
//! The pipeline localizes a vehicle on a known semantic map with no pose
//! prior. A bird's-eye-view observation of the surroundings is matched
//! against the map in two stages: a cross-attention retrieval head scores a
//! coarse grid of map cells, then keypoint matching and RANSAC homography
//! estimation align the observation against the retrieved patch down to
//! sub-meter accuracy.
//!
//! Everything in this crate is pure computation over in-memory rasters and
//! descriptor grids; file formats, parallel orchestration and the command
//! line live in the companion `semloc` crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![warn(clippy::all)]

extern crate alloc;

pub mod dataset;
pub mod descriptor;
pub mod error;
pub mod finealign;
pub mod geom;
pub mod linalg;
pub mod math;
pub mod metrics;
pub mod raster;
pub mod retrieval;
pub mod rng;
pub mod sensorsim;
pub mod temporal;
pub mod worldgen;

#[cfg(any(test, feature = "testutil"))]
pub mod testutil;

pub use error::CoreError;
pub use geom::{GridIndex, Homography, MapSpec, Pose2};
pub use raster::SemanticRaster;
