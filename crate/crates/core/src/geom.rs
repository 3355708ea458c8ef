//! SE(2) pose algebra, map/grid/pixel conversions and projective
//! transforms.
//!
//! Frame conventions, fixed project-wide:
//! - World frame: `x` east-positive, `y` north-positive, meters, origin at
//!   the map's southwest corner.
//! - Rasters: row 0 is the north edge, so `row` grows southward while `col`
//!   grows eastward.
//! - Pose frame: `+y` is the vehicle's forward axis. `theta = 0` faces
//!   north and positive angles turn counterclockwise (toward west).
//! - Points exactly on a cell or pixel edge round toward the lower index
//!   (floor semantics).

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::math;

/// Planar pose: position in meters (map frame) plus heading in radians,
/// always normalized into `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: math::normalize_angle(theta),
        }
    }

    pub fn identity() -> Self {
        Self { x: 0.0, y: 0.0, theta: 0.0 }
    }

    /// Group composition `self ∘ rhs`: apply `rhs` in `self`'s frame.
    pub fn compose(&self, rhs: &Pose2) -> Pose2 {
        let (s, c) = (math::sin(self.theta), math::cos(self.theta));
        Pose2::new(
            self.x + c * rhs.x - s * rhs.y,
            self.y + s * rhs.x + c * rhs.y,
            self.theta + rhs.theta,
        )
    }

    /// Group inverse: `self.compose(&self.inverse())` is the identity.
    pub fn inverse(&self) -> Pose2 {
        let (s, c) = (math::sin(self.theta), math::cos(self.theta));
        Pose2::new(
            -(c * self.x + s * self.y),
            -(-s * self.x + c * self.y),
            -self.theta,
        )
    }

    /// Euclidean distance between positions, ignoring heading.
    pub fn distance(&self, other: &Pose2) -> f64 {
        math::hypot(self.x - other.x, self.y - other.y)
    }
}

pub fn se2_compose(a: &Pose2, b: &Pose2) -> Pose2 {
    a.compose(b)
}

pub fn se2_inverse(p: &Pose2) -> Pose2 {
    p.inverse()
}

/// Geometry of a map and its retrieval grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapSpec {
    /// Side length of the square map in meters.
    pub extent_m: f64,
    /// Meters per raster pixel.
    pub resolution: f64,
    /// Cells per side of the coarse retrieval grid.
    pub grid_dim: usize,
    /// Side length of the ego-centric observation window in meters.
    pub window_m: f64,
}

impl Default for MapSpec {
    fn default() -> Self {
        Self {
            extent_m: 500.0,
            resolution: 0.5,
            grid_dim: 10,
            window_m: 100.0,
        }
    }
}

impl MapSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.extent_m > 0.0 && self.resolution > 0.0 && self.window_m > 0.0) {
            return Err(CoreError::InvalidConfig("map extents must be positive".into()));
        }
        let side = self.extent_m / self.resolution;
        if (side - math::round(side)).abs() > 1e-9 {
            return Err(CoreError::InvalidConfig(
                "extent_m / resolution must be an integer pixel count".into(),
            ));
        }
        let wside = self.window_m / self.resolution;
        if (wside - math::round(wside)).abs() > 1e-9 {
            return Err(CoreError::InvalidConfig(
                "window_m / resolution must be an integer pixel count".into(),
            ));
        }
        if self.grid_dim == 0 {
            return Err(CoreError::InvalidConfig("grid_dim must be positive".into()));
        }
        Ok(())
    }

    /// Raster side in pixels (1000 at defaults).
    pub fn raster_px(&self) -> usize {
        math::round(self.extent_m / self.resolution) as usize
    }

    /// Observation window side in pixels (200 at defaults).
    pub fn window_px(&self) -> usize {
        math::round(self.window_m / self.resolution) as usize
    }

    /// Cell pitch in meters (50 at defaults).
    pub fn cell_m(&self) -> f64 {
        self.extent_m / self.grid_dim as f64
    }

    /// Cell pitch in pixels (100 at defaults).
    pub fn cell_px(&self) -> usize {
        math::round(self.cell_m() / self.resolution) as usize
    }

    /// Number of grid cells (100 at defaults).
    pub fn n_cells(&self) -> usize {
        self.grid_dim * self.grid_dim
    }
}

/// Position of one coarse cell in the retrieval grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridIndex {
    pub row: usize,
    pub col: usize,
}

impl GridIndex {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn flat(&self, grid_dim: usize) -> usize {
        self.row * grid_dim + self.col
    }

    pub fn from_flat(flat: usize, grid_dim: usize) -> Self {
        Self { row: flat / grid_dim, col: flat % grid_dim }
    }

    /// Chebyshev (chessboard) distance to another cell.
    pub fn chebyshev(&self, other: &GridIndex) -> usize {
        let dr = self.row.abs_diff(other.row);
        let dc = self.col.abs_diff(other.col);
        dr.max(dc)
    }
}

/// Map a world position to its coarse grid cell.
pub fn world_to_cell(x: f64, y: f64, spec: &MapSpec) -> Result<GridIndex> {
    if !(0.0..spec.extent_m).contains(&x) || !(0.0..spec.extent_m).contains(&y) {
        return Err(CoreError::OutOfMapBounds { x, y });
    }
    let cell = spec.cell_m();
    let g = spec.grid_dim;
    let col = (math::floor(x / cell) as usize).min(g - 1);
    let row = (math::floor((spec.extent_m - y) / cell) as usize).min(g - 1);
    Ok(GridIndex { row, col })
}

/// World position of a cell's center.
pub fn cell_center(idx: &GridIndex, spec: &MapSpec) -> (f64, f64) {
    let cell = spec.cell_m();
    (
        (idx.col as f64 + 0.5) * cell,
        spec.extent_m - (idx.row as f64 + 0.5) * cell,
    )
}

/// 3x3 projective transform between pixel frames, stored row-major.
///
/// Normalized on construction: bottom-right entry set to 1 when it is
/// nonzero, otherwise scaled to unit Frobenius norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    pub m: [f64; 9],
}

impl Homography {
    pub fn new(m: [f64; 9]) -> Result<Self> {
        let mut h = Self { m };
        h.normalize();
        let det = h.det();
        if !det.is_finite() || math::abs(det) < 1e-12 {
            return Err(CoreError::Shape("homography matrix is singular".into()));
        }
        Ok(h)
    }

    pub fn identity() -> Self {
        Self { m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0] }
    }

    pub fn translation(du: f64, dv: f64) -> Self {
        Self { m: [1.0, 0.0, du, 0.0, 1.0, dv, 0.0, 0.0, 1.0] }
    }

    fn normalize(&mut self) {
        let w = self.m[8];
        if math::abs(w) > 1e-12 {
            for v in &mut self.m {
                *v /= w;
            }
        } else {
            let norm = math::sqrt(self.m.iter().map(|v| v * v).sum());
            if norm > 0.0 {
                for v in &mut self.m {
                    *v /= norm;
                }
            }
        }
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * m[7] - m[4] * m[6])
    }

    /// Matrix product `self * rhs` (apply `rhs` first).
    pub fn compose(&self, rhs: &Homography) -> Result<Homography> {
        let a = &self.m;
        let b = &rhs.m;
        let mut out = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                out[i * 3 + j] =
                    a[i * 3] * b[j] + a[i * 3 + 1] * b[3 + j] + a[i * 3 + 2] * b[6 + j];
            }
        }
        Homography::new(out)
    }

    pub fn inverse(&self) -> Result<Homography> {
        let m = &self.m;
        let det = self.det();
        if math::abs(det) < 1e-12 {
            return Err(CoreError::Shape("homography matrix is singular".into()));
        }
        let adj = [
            m[4] * m[8] - m[5] * m[7],
            m[2] * m[7] - m[1] * m[8],
            m[1] * m[5] - m[2] * m[4],
            m[5] * m[6] - m[3] * m[8],
            m[0] * m[8] - m[2] * m[6],
            m[2] * m[3] - m[0] * m[5],
            m[3] * m[7] - m[4] * m[6],
            m[1] * m[6] - m[0] * m[7],
            m[0] * m[4] - m[1] * m[3],
        ];
        let mut out = [0.0; 9];
        for (o, a) in out.iter_mut().zip(adj) {
            *o = a / det;
        }
        Homography::new(out)
    }
}

/// Perspective-divided image of pixel `(u, v)` under `h`.
pub fn apply_homography(h: &Homography, u: f64, v: f64) -> Result<(f64, f64)> {
    let m = &h.m;
    let w = m[6] * u + m[7] * v + m[8];
    if math::abs(w) < 1e-12 {
        return Err(CoreError::DegenerateProjection);
    }
    Ok((
        (m[0] * u + m[1] * v + m[2]) / w,
        (m[3] * u + m[4] * v + m[5]) / w,
    ))
}

/// Pose expressed as a pixel-frame homography: rotation by `theta` plus
/// translation scaled by the raster resolution. Inverse of
/// [`homography_to_se2`].
pub fn se2_to_homography(p: &Pose2, resolution: f64) -> Homography {
    let (s, c) = (math::sin(p.theta), math::cos(p.theta));
    Homography {
        m: [c, -s, p.x / resolution, s, c, p.y / resolution, 0.0, 0.0, 1.0],
    }
}

/// Result of decomposing a near-rigid homography.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityDecomp {
    pub pose: Pose2,
    /// Isotropic scale of the rotation block.
    pub scale: f64,
    /// Frobenius distance of the 2x2 block from its closest scaled
    /// rotation, relative to the block's Frobenius norm.
    pub residual: f64,
    /// Set when `residual` exceeds [`NON_RIGID_THRESHOLD`].
    pub non_rigid: bool,
}

/// Relative deviation above which a homography no longer counts as rigid.
pub const NON_RIGID_THRESHOLD: f64 = 0.02;

/// Recover a planar pose from a near-similarity homography.
///
/// The rotation angle comes from the polar decomposition of the upper-left
/// 2x2 block; the translation is the third column scaled back to meters.
/// A block that deviates from a scaled rotation by more than
/// [`NON_RIGID_THRESHOLD`] sets the `non_rigid` warning rather than
/// failing, so callers can decide how much to trust the estimate.
pub fn homography_to_se2(h: &Homography, resolution: f64) -> SimilarityDecomp {
    let m = &h.m;
    let (a, b, c, d) = (m[0], m[1], m[3], m[4]);
    let theta = math::atan2(c - b, a + d);
    let scale = 0.5 * math::hypot(c - b, a + d);
    let (s, co) = (math::sin(theta), math::cos(theta));
    // Closest scaled rotation in Frobenius norm.
    let rs = [scale * co, -scale * s, scale * s, scale * co];
    let diff = [(a - rs[0]), (b - rs[1]), (c - rs[2]), (d - rs[3])];
    let res_abs = math::sqrt(diff.iter().map(|x| x * x).sum());
    let block_norm = math::sqrt(a * a + b * b + c * c + d * d);
    let residual = if block_norm > 1e-12 { res_abs / block_norm } else { f64::INFINITY };
    SimilarityDecomp {
        pose: Pose2::new(m[2] * resolution, m[5] * resolution, theta),
        scale,
        residual,
        non_rigid: residual > NON_RIGID_THRESHOLD,
    }
}
