//! Error types shared across the core pipeline.

use alloc::string::String;
use core::fmt;

/// Errors produced by the core algorithms.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// A world coordinate fell outside the map extent.
    OutOfMapBounds { x: f64, y: f64 },
    /// A homography mapped a point to a vanishing homogeneous coordinate.
    DegenerateProjection,
    /// Procedural generation could not satisfy a config constraint.
    Generation(String),
    /// No eligible spawn pixel was found within the attempt budget.
    SpawnFailed,
    /// A simulated trajectory could not stay inside the spawn margins.
    TrajectoryExited,
    /// Raster sides are not divisible by the token size.
    Tiling { side: usize, token_px: usize },
    /// Tensor dimensions disagree with the parameter shapes.
    Shape(String),
    /// Training hit a non-finite loss; carries (epoch, batch, loss trace).
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        trace: alloc::vec::Vec<f64>,
    },
    /// Degradation calibration could not reach the target IoU; carries the
    /// achievable range at the knob bounds.
    Calibration { lo: f64, hi: f64, target: f64 },
    /// Fewer keypoint matches than the minimum required for alignment.
    InsufficientMatches { found: usize, needed: usize },
    /// RANSAC found no model reaching the inlier minimum.
    AlignmentFailure { best_inliers: usize, needed: usize },
    /// A metric was requested over an empty sample set.
    UndefinedMetric,
    /// A frame sequence used an unsupported frame count.
    BadFrameCount(usize),
    /// Config values outside their documented domain.
    InvalidConfig(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::OutOfMapBounds { x, y } => {
                write!(f, "query point ({x:.3}, {y:.3}) left the map")
            }
            CoreError::DegenerateProjection => {
                write!(f, "homography projected to a vanishing homogeneous coordinate")
            }
            CoreError::Generation(what) => write!(f, "map generation failed: {what}"),
            CoreError::SpawnFailed => write!(f, "no eligible spawn pixel found"),
            CoreError::TrajectoryExited => {
                write!(f, "trajectory left the spawn margin and retries were exhausted")
            }
            CoreError::Tiling { side, token_px } => {
                write!(f, "raster side {side} px is not divisible by token size {token_px} px")
            }
            CoreError::Shape(what) => write!(f, "shape mismatch: {what}"),
            CoreError::NonFiniteLoss { epoch, batch, .. } => {
                write!(f, "non-finite loss at epoch {epoch}, batch {batch}")
            }
            CoreError::Calibration { lo, hi, target } => write!(
                f,
                "calibration target IoU {target:.3} unreachable; achievable range [{lo:.3}, {hi:.3}]"
            ),
            CoreError::InsufficientMatches { found, needed } => {
                write!(f, "only {found} keypoint matches, {needed} required")
            }
            CoreError::AlignmentFailure { best_inliers, needed } => {
                write!(f, "no RANSAC model reached {needed} inliers (best {best_inliers})")
            }
            CoreError::UndefinedMetric => write!(f, "metric undefined over an empty sample set"),
            CoreError::BadFrameCount(n) => {
                write!(f, "frame count {n} unsupported (expected 1, 2, 4 or 8)")
            }
            CoreError::InvalidConfig(what) => write!(f, "invalid config: {what}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
