//! Token descriptors: hand-crafted features plus a seeded random
//! projection.
//!
//! This is the feature-extraction stage in front of the retrieval head.
//! Each token cell summarizes its pixels as a class histogram, a
//! class-boundary orientation histogram and coarse sub-cell majority
//! codes; a fixed random projection mixes the raw vector up to the working
//! dimension. The extractor has no trainable state, which keeps the
//! boundary between feature extraction and the trainable matcher clean.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geom::MapSpec;
use crate::math;
use crate::raster::{SemanticRaster, NUM_CLASSES};
use crate::rng::Rng;

/// Class histogram bins.
pub const HIST_DIM: usize = NUM_CLASSES;
/// Boundary-orientation bins over the full circle (45 degrees each, so a
/// quarter-turn of the raster shifts the histogram by exactly two bins).
pub const ORIENT_BINS: usize = 8;
/// Sub-cell majority codes (2x2 split of the token).
pub const CODE_DIM: usize = 4;
/// Raw feature length before projection.
pub const RAW_DIM: usize = HIST_DIM + ORIENT_BINS + CODE_DIM;

/// Settings of the descriptor stage. `proj_seed` pins the random
/// projection; trained retrieval parameters are only meaningful together
/// with the descriptor config they were trained against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescriptorConfig {
    /// Descriptor dimension D.
    pub dim: usize,
    /// Token cell side in pixels.
    pub token_px: usize,
    /// Seed of the fixed random projection.
    pub proj_seed: u64,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        Self { dim: 64, token_px: 20, proj_seed: 7 }
    }
}

/// Grid of unit-norm descriptors, one per token cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    /// Row-major `rows * cols` descriptors of `dim` values each.
    pub data: Vec<f64>,
}

impl TokenGrid {
    pub fn from_data(rows: usize, cols: usize, dim: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols * dim);
        Self { rows, cols, dim, data }
    }

    #[inline]
    pub fn descriptor(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.cols + col) * self.dim;
        &self.data[start..start + self.dim]
    }
}

/// Pooled map descriptors: one per coarse retrieval cell.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseGrid {
    pub grid_dim: usize,
    pub dim: usize,
    /// Row-major `grid_dim * grid_dim` descriptors.
    pub data: Vec<f64>,
}

impl BaseGrid {
    #[inline]
    pub fn descriptor(&self, flat: usize) -> &[f64] {
        &self.data[flat * self.dim..(flat + 1) * self.dim]
    }
}

/// Raw (pre-projection) token features. Exposed so tests can check the
/// construction properties the projection would obscure.
pub struct RawTokenField {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl RawTokenField {
    #[inline]
    pub fn feature(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.cols + col) * RAW_DIM;
        &self.data[start..start + RAW_DIM]
    }
}

/// Compute raw token features for every `token_px` x `token_px` cell.
pub fn raw_features(raster: &SemanticRaster, token_px: usize) -> Result<RawTokenField> {
    if token_px == 0 || raster.width % token_px != 0 {
        return Err(CoreError::Tiling { side: raster.width, token_px });
    }
    if raster.height % token_px != 0 {
        return Err(CoreError::Tiling { side: raster.height, token_px });
    }
    let rows = raster.height / token_px;
    let cols = raster.width / token_px;
    let (w, h) = (raster.width, raster.height);

    let boundary = raster.boundary_indicator();

    // Integer Sobel responses on the boundary indicator; integer-exact, so
    // a quarter-turn of the raster maps gradients onto each other with no
    // rounding at all.
    let grad = |i: usize, j: usize| -> (i32, i32) {
        let b = |r: usize, c: usize| boundary[r * w + c] as i32;
        let gx = (b(i - 1, j + 1) + 2 * b(i, j + 1) + b(i + 1, j + 1))
            - (b(i - 1, j - 1) + 2 * b(i, j - 1) + b(i + 1, j - 1));
        let gy = (b(i + 1, j - 1) + 2 * b(i + 1, j) + b(i + 1, j + 1))
            - (b(i - 1, j - 1) + 2 * b(i - 1, j) + b(i - 1, j + 1));
        (gx, gy)
    };

    let mut data = vec![0.0f64; rows * cols * RAW_DIM];
    for tr in 0..rows {
        for tc in 0..cols {
            let feat = &mut data[(tr * cols + tc) * RAW_DIM..(tr * cols + tc + 1) * RAW_DIM];
            let (r0, c0) = (tr * token_px, tc * token_px);

            // Class histogram.
            for i in r0..r0 + token_px {
                for j in c0..c0 + token_px {
                    feat[raster.get(i, j) as usize] += 1.0;
                }
            }
            let total = (token_px * token_px) as f64;
            for v in feat[..HIST_DIM].iter_mut() {
                *v /= total;
            }

            // Boundary orientation histogram over interior pixels,
            // magnitude-weighted, bins offset by half a width so gradients
            // along the axes and diagonals sit at bin centers.
            let mut weight_total = 0.0;
            for i in r0.max(1)..(r0 + token_px).min(h - 1) {
                for j in c0.max(1)..(c0 + token_px).min(w - 1) {
                    if boundary[i * w + j] == 0 {
                        continue;
                    }
                    let (gx, gy) = grad(i, j);
                    if gx == 0 && gy == 0 {
                        continue;
                    }
                    let angle = math::atan2(gy as f64, gx as f64);
                    let turn = (angle + 2.0 * core::f64::consts::PI) % (2.0 * core::f64::consts::PI);
                    let bin = (math::floor((turn + core::f64::consts::PI / 8.0)
                        / (core::f64::consts::PI / 4.0)) as usize)
                        % ORIENT_BINS;
                    let mag = math::sqrt((gx * gx + gy * gy) as f64);
                    feat[HIST_DIM + bin] += mag;
                    weight_total += mag;
                }
            }
            if weight_total > 0.0 {
                for v in feat[HIST_DIM..HIST_DIM + ORIENT_BINS].iter_mut() {
                    *v /= weight_total;
                }
            }

            // 2x2 sub-cell majority codes, scaled into [0, 1].
            let half = token_px / 2;
            for (q, (qr, qc)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                let mut counts = [0usize; NUM_CLASSES];
                for i in r0 + qr * half..r0 + (qr + 1) * half {
                    for j in c0 + qc * half..c0 + (qc + 1) * half {
                        counts[raster.get(i, j) as usize] += 1;
                    }
                }
                let mut best = 0usize;
                for k in 1..NUM_CLASSES {
                    if counts[k] > counts[best] {
                        best = k;
                    }
                }
                feat[HIST_DIM + ORIENT_BINS + q] = best as f64 / (NUM_CLASSES - 1) as f64;
            }
        }
    }
    Ok(RawTokenField { rows, cols, data })
}

/// Seeded Gaussian projection matrix, row-major `dim` x `RAW_DIM`.
fn projection_matrix(dim: usize, proj_seed: u64) -> Vec<f64> {
    let mut rng = Rng::new(proj_seed);
    let scale = 1.0 / math::sqrt(RAW_DIM as f64);
    (0..dim * RAW_DIM).map(|_| rng.normal() * scale).collect()
}

/// Convert a raster into a grid of unit-norm token descriptors.
pub fn tokenize(raster: &SemanticRaster, cfg: &DescriptorConfig) -> Result<TokenGrid> {
    let raw = raw_features(raster, cfg.token_px)?;
    let proj = projection_matrix(cfg.dim, cfg.proj_seed);
    let mut data = vec![0.0f64; raw.rows * raw.cols * cfg.dim];
    for t in 0..raw.rows * raw.cols {
        let feat = &raw.data[t * RAW_DIM..(t + 1) * RAW_DIM];
        let out = &mut data[t * cfg.dim..(t + 1) * cfg.dim];
        let mut norm = 0.0;
        for (k, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (p, f) in proj[k * RAW_DIM..(k + 1) * RAW_DIM].iter().zip(feat) {
                acc += p * f;
            }
            *o = acc;
            norm += acc * acc;
        }
        let norm = math::sqrt(norm);
        if norm > 1e-12 {
            for o in out.iter_mut() {
                *o /= norm;
            }
        }
    }
    Ok(TokenGrid { rows: raw.rows, cols: raw.cols, dim: cfg.dim, data })
}

/// Pool map tokens into the coarse base grid.
///
/// Each cell's descriptor is the mean of its own tokens averaged with the
/// means of its existing 3x3 neighbor cells (no padding at the border),
/// then re-normalized. Neighborhood averaging bakes local context into
/// every cell.
pub fn pool_base_grid(map_tokens: &TokenGrid, spec: &MapSpec) -> Result<BaseGrid> {
    let g = spec.grid_dim;
    let dim = map_tokens.dim;
    if map_tokens.rows % g != 0 || map_tokens.cols % g != 0 || map_tokens.rows != map_tokens.cols {
        return Err(CoreError::Shape(alloc::format!(
            "token grid {}x{} does not tile a {g}x{g} base grid",
            map_tokens.rows,
            map_tokens.cols
        )));
    }
    let per_cell = map_tokens.rows / g;

    // Single pass scattering each token into its cell's accumulator.
    let mut cell_sums = vec![0.0f64; g * g * dim];
    for tr in 0..map_tokens.rows {
        let gr = tr / per_cell;
        for tc in 0..map_tokens.cols {
            let gc = tc / per_cell;
            let acc = &mut cell_sums[(gr * g + gc) * dim..(gr * g + gc + 1) * dim];
            for (a, v) in acc.iter_mut().zip(map_tokens.descriptor(tr, tc)) {
                *a += v;
            }
        }
    }
    let count = (per_cell * per_cell) as f64;
    for v in cell_sums.iter_mut() {
        *v /= count;
    }

    let mut data = vec![0.0f64; g * g * dim];
    for gr in 0..g {
        for gc in 0..g {
            let out = &mut data[(gr * g + gc) * dim..(gr * g + gc + 1) * dim];
            let mut neighbors = 0usize;
            for nr in gr.saturating_sub(1)..=(gr + 1).min(g - 1) {
                for nc in gc.saturating_sub(1)..=(gc + 1).min(g - 1) {
                    neighbors += 1;
                    let src = &cell_sums[(nr * g + nc) * dim..(nr * g + nc + 1) * dim];
                    for (o, v) in out.iter_mut().zip(src) {
                        *o += v;
                    }
                }
            }
            let mut norm = 0.0;
            for o in out.iter_mut() {
                *o /= neighbors as f64;
                norm += *o * *o;
            }
            let norm = math::sqrt(norm);
            if norm > 1e-12 {
                for o in out.iter_mut() {
                    *o /= norm;
                }
            }
        }
    }
    Ok(BaseGrid { grid_dim: g, dim, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{CLASS_CARPARK, CLASS_CROSSING, CLASS_DRIVABLE};
    use core::f64::consts::PI;

    fn blocky_raster(side: usize, seed: u64) -> SemanticRaster {
        let mut rng = Rng::new(seed);
        let mut r = SemanticRaster::filled(side, side, 0.5);
        for _ in 0..40 {
            let class = (rng.below(NUM_CLASSES - 1) + 1) as u8;
            let (cr, cc) = (rng.below(side), rng.below(side));
            let h = 4 + rng.below(side / 4);
            let w = 4 + rng.below(side / 4);
            for i in cr.saturating_sub(h / 2)..(cr + h / 2).min(side) {
                for j in cc.saturating_sub(w / 2)..(cc + w / 2).min(side) {
                    r.set(i, j, class);
                }
            }
        }
        r
    }

    #[test]
    fn all_background_tokens_are_identical() {
        let raster = SemanticRaster::filled(200, 200, 0.5);
        let grid = tokenize(&raster, &DescriptorConfig::default()).unwrap();
        let first = grid.descriptor(0, 0).to_vec();
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                assert_eq!(grid.descriptor(r, c), &first[..]);
            }
        }
        let norm: f64 = first.iter().map(|v| v * v).sum::<f64>();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tokenize_is_deterministic() {
        let raster = blocky_raster(200, 5);
        let cfg = DescriptorConfig::default();
        let a = tokenize(&raster, &cfg).unwrap();
        let b = tokenize(&raster, &cfg).unwrap();
        assert_eq!(a.data, b.data);
        let other = tokenize(&raster, &DescriptorConfig { proj_seed: 8, ..cfg }).unwrap();
        assert_ne!(a.data, other.data);
    }

    #[test]
    fn quarter_turn_shifts_orientation_bins_by_two() {
        let raster = blocky_raster(200, 11);
        let turned = raster.rotated_by(PI / 2.0);
        let a = raw_features(&raster, 20).unwrap();
        let b = raw_features(&turned, 20).unwrap();
        let n = a.rows;
        for r in 0..n {
            for c in 0..n {
                // rotated_by(pi/2) sends source (i, j) to (side-1-j, i), so
                // token (r, c) of the turned raster covers source token
                // (n-1-c, r).
                let fa = a.feature(n - 1 - c, r);
                let fb = b.feature(r, c);
                for k in 0..HIST_DIM {
                    assert!((fa[k] - fb[k]).abs() < 1e-12, "hist bin {k} at ({r},{c})");
                }
                for k in 0..ORIENT_BINS {
                    let shifted = HIST_DIM + (k + 2) % ORIENT_BINS;
                    assert!(
                        (fa[HIST_DIM + k] - fb[shifted]).abs() < 1e-9,
                        "orient bin {k} at ({r},{c}): {} vs {}",
                        fa[HIST_DIM + k],
                        fb[shifted]
                    );
                }
            }
        }
    }

    #[test]
    fn non_divisible_sides_are_a_tiling_error() {
        let raster = SemanticRaster::filled(190, 190, 0.5);
        assert!(matches!(
            tokenize(&raster, &DescriptorConfig::default()),
            Err(CoreError::Tiling { .. })
        ));
    }

    #[test]
    fn translation_by_one_token_shifts_the_grid() {
        let side = 200;
        let token = 20;
        let a = blocky_raster(side, 21);
        let mut b = SemanticRaster::filled(side, side, 0.5);
        for i in 0..side {
            for j in 0..side - token {
                b.set(i, j, a.get(i, j + token));
            }
        }
        let cfg = DescriptorConfig::default();
        let ga = tokenize(&a, &cfg).unwrap();
        let gb = tokenize(&b, &cfg).unwrap();
        // Interior tokens: b's first column sits on the raster border
        // (boundary pixels lose their left neighbor) and its last two
        // columns see the shifted-in fill, so both are excluded.
        for r in 0..ga.rows {
            for c in 1..ga.cols - 2 {
                assert_eq!(gb.descriptor(r, c), ga.descriptor(r, c + 1), "token ({r},{c})");
            }
        }
    }

    #[test]
    fn all_descriptors_finite_and_unit_norm() {
        let raster = blocky_raster(200, 33);
        let grid = tokenize(&raster, &DescriptorConfig::default()).unwrap();
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                let d = grid.descriptor(r, c);
                assert!(d.iter().all(|v| v.is_finite()));
                let norm: f64 = d.iter().map(|v| v * v).sum();
                assert!((norm - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn constant_token_field_pools_to_identical_cells() {
        let spec = MapSpec::default();
        let dim = 16;
        let mut data = vec![0.0; 50 * 50 * dim];
        for t in 0..50 * 50 {
            data[t * dim] = 0.6;
            data[t * dim + 1] = 0.8;
        }
        let tokens = TokenGrid::from_data(50, 50, dim, data);
        let grid = pool_base_grid(&tokens, &spec).unwrap();
        let first = grid.descriptor(0).to_vec();
        for cell in 0..spec.n_cells() {
            for (a, b) in grid.descriptor(cell).iter().zip(&first) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_nonzero_cell_spreads_to_its_neighborhood() {
        let spec = MapSpec::default();
        let dim = 8;
        let mut data = vec![0.0; 50 * 50 * dim];
        for tr in 25..30 {
            for tc in 25..30 {
                data[(tr * 50 + tc) * dim + 3] = 1.0;
            }
        }
        let tokens = TokenGrid::from_data(50, 50, dim, data);
        let grid = pool_base_grid(&tokens, &spec).unwrap();
        for row in 0..10 {
            for col in 0..10 {
                let norm: f64 = grid.descriptor(row * 10 + col).iter().map(|v| v * v).sum();
                let in_block = (4..=6).contains(&row) && (4..=6).contains(&col);
                assert_eq!(norm > 1e-12, in_block, "cell ({row},{col})");
            }
        }
    }

    #[test]
    fn pooling_matches_brute_force_oracle() {
        let spec = MapSpec::default();
        let dim = 24;
        let mut rng = Rng::new(99);
        let data: Vec<f64> = (0..50 * 50 * dim).map(|_| rng.normal()).collect();
        let tokens = TokenGrid::from_data(50, 50, dim, data);
        let fast = pool_base_grid(&tokens, &spec).unwrap();
        let oracle = crate::testutil::pool_base_grid_reference(&tokens, &spec);
        assert_eq!(fast.grid_dim, oracle.grid_dim);
        for (a, b) in fast.data.iter().zip(&oracle.data) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn rotating_the_map_rotates_pooled_distances() {
        // Pairwise descriptor distances survive a quarter-turn of the map
        // up to the random projection's distortion of the orientation-bin
        // shift; the 0.15 bound is the fixture recorded from this seed set.
        let spec = MapSpec { extent_m: 100.0, ..MapSpec::default() }; // 200 px map
        let raster = {
            let mut r = blocky_raster(200, 55);
            for j in 0..200 {
                r.set(100, j, CLASS_DRIVABLE);
                r.set(j, 60, CLASS_CROSSING);
                r.set(j, 140, CLASS_CARPARK);
            }
            r
        };
        let cfg = DescriptorConfig::default();
        let g1 = pool_base_grid(&tokenize(&raster, &cfg).unwrap(), &spec).unwrap();
        let g2 =
            pool_base_grid(&tokenize(&raster.rotated_by(PI / 2.0), &cfg).unwrap(), &spec).unwrap();
        let g = spec.grid_dim;
        let rot = |row: usize, col: usize| (col, g - 1 - row);

        let mut devs: Vec<f64> = Vec::new();
        for a in 0..spec.n_cells() {
            for b in (a + 1)..spec.n_cells() {
                let (ar, ac) = (a / g, a % g);
                let (br, bc) = (b / g, b % g);
                let (ar2, ac2) = rot(ar, ac);
                let (br2, bc2) = rot(br, bc);
                let d1: f64 = g1
                    .descriptor(a)
                    .iter()
                    .zip(g1.descriptor(b))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                let d2: f64 = g2
                    .descriptor(ar2 * g + ac2)
                    .iter()
                    .zip(g2.descriptor(br2 * g + bc2))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                if d1 > 0.05 {
                    devs.push((d2 - d1).abs() / d1);
                }
            }
        }
        devs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = devs[devs.len() / 2];
        assert!(median < 0.15, "median relative deviation {median}");
    }
}
