//! Reference implementations used as cross-check oracles by the test
//! suites. Each function recomputes a result through an independent route
//! (different algebra, different code path) from the implementation it
//! checks. Compiled only for tests and the `testutil` feature; nothing
//! here is part of the production pipeline.

use alloc::vec;
use alloc::vec::Vec;

use crate::descriptor::{BaseGrid, TokenGrid};
use crate::geom::{apply_homography, Homography, MapSpec, Pose2};
use crate::math;
use crate::raster::SemanticRaster;
use crate::retrieval::{LossConfig, RetrievalParams, RetrievalScores};

/// Observation renderer built from composed homography matrices instead of
/// inline trigonometry: maps every output pixel back into the map raster
/// through `translate * rotate * translate` and floor-samples.
pub fn render_observation_reference(
    map: &SemanticRaster,
    pose: &Pose2,
    spec: &MapSpec,
) -> SemanticRaster {
    let side = spec.window_px();
    let res = spec.resolution;
    let half = side as f64 / 2.0;
    let (s, c) = math::rot_components(pose.theta);

    // Window pixel -> map pixel, assembled from primitive transforms.
    let to_center = Homography::translation(-half, -half);
    let rotate = Homography::new([c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let place = Homography::translation(
        pose.x / res,
        (map.height as f64 * res - pose.y) / res,
    );
    let h = place.compose(&rotate.compose(&to_center).unwrap()).unwrap();

    let mut out = SemanticRaster::filled(side, side, res);
    for i in 0..side {
        for j in 0..side {
            let (um, vm) = apply_homography(&h, j as f64 + 0.5, i as f64 + 0.5).unwrap();
            let (col, row) = (math::floor(um) as i64, math::floor(vm) as i64);
            if map.in_bounds(row, col) {
                out.set(i, j, map.get(row as usize, col as usize));
            }
        }
    }
    out
}

/// Brute-force base-grid pooling: for every grid cell, sum the tokens of
/// the cell and its existing 3x3 neighbors directly and divide by the
/// count, with no incremental reuse.
pub fn pool_base_grid_reference(map_tokens: &TokenGrid, spec: &MapSpec) -> BaseGrid {
    let g = spec.grid_dim;
    let dim = map_tokens.dim;
    let per_cell = map_tokens.rows / g;
    let mut cell_means = vec![0.0f64; g * g * dim];
    for gr in 0..g {
        for gc in 0..g {
            let mut acc = vec![0.0f64; dim];
            for tr in gr * per_cell..(gr + 1) * per_cell {
                for tc in gc * per_cell..(gc + 1) * per_cell {
                    for (a, v) in acc.iter_mut().zip(map_tokens.descriptor(tr, tc)) {
                        *a += v;
                    }
                }
            }
            let count = (per_cell * per_cell) as f64;
            for (dst, a) in cell_means[(gr * g + gc) * dim..(gr * g + gc + 1) * dim]
                .iter_mut()
                .zip(&acc)
            {
                *dst = a / count;
            }
        }
    }

    let mut data = vec![0.0f64; g * g * dim];
    for gr in 0..g {
        for gc in 0..g {
            let mut acc = vec![0.0f64; dim];
            let mut neighbors = 0usize;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (nr, nc) = (gr as i64 + dr, gc as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= g as i64 || nc >= g as i64 {
                        continue;
                    }
                    neighbors += 1;
                    let src = &cell_means
                        [(nr as usize * g + nc as usize) * dim..(nr as usize * g + nc as usize + 1) * dim];
                    for (a, v) in acc.iter_mut().zip(src) {
                        *a += v;
                    }
                }
            }
            let mut norm = 0.0;
            for v in acc.iter_mut() {
                *v /= neighbors as f64;
                norm += *v * *v;
            }
            let norm = math::sqrt(norm);
            if norm > 0.0 {
                for v in acc.iter_mut() {
                    *v /= norm;
                }
            }
            data[(gr * g + gc) * dim..(gr * g + gc + 1) * dim].copy_from_slice(&acc);
        }
    }
    BaseGrid { grid_dim: g, dim, data }
}

/// Straight-line scalar reference for the attention forward pass: explicit
/// loops, one value at a time, no buffer reuse.
pub fn score_cells_reference(
    query: &TokenGrid,
    base: &BaseGrid,
    params: &RetrievalParams,
) -> RetrievalScores {
    let t = query.rows * query.cols;
    let n = base.grid_dim * base.grid_dim;
    let d = params.dim;
    let heads = params.heads;
    let dh = d / heads;

    let q_in = |ti: usize, k: usize| query.data[ti * d + k] + params.query_pos[ti * d + k];

    // Center-and-rescale the cell descriptors one value at a time, the
    // same preprocessing the production path applies.
    let mut centered = vec![0.0f64; n * d];
    for k in 0..d {
        let mut mean = 0.0;
        for ci in 0..n {
            mean += base.data[ci * d + k];
        }
        mean /= n as f64;
        for ci in 0..n {
            centered[ci * d + k] = base.data[ci * d + k] - mean;
        }
    }
    for ci in 0..n {
        let mut norm = 0.0;
        for k in 0..d {
            norm += centered[ci * d + k] * centered[ci * d + k];
        }
        let norm = math::sqrt(norm);
        if norm > 1e-9 {
            for k in 0..d {
                centered[ci * d + k] /= norm;
            }
        }
    }
    let k_in = |ci: usize, k: usize| centered[ci * d + k] + params.base_pos[ci * d + k];

    let mut pooled = vec![0.0f64; d];
    let mut attended = vec![0.0f64; t * d];
    for h in 0..heads {
        for ti in 0..t {
            let mut qh = vec![0.0f64; dh];
            for (o, q) in qh.iter_mut().enumerate() {
                for k in 0..d {
                    *q += q_in(ti, k) * params.w_query[(h * dh + o) * d + k];
                }
            }
            let mut scores = vec![0.0f64; n];
            for (ci, score) in scores.iter_mut().enumerate() {
                let mut kh = vec![0.0f64; dh];
                for (o, kk) in kh.iter_mut().enumerate() {
                    for k in 0..d {
                        *kk += k_in(ci, k) * params.w_key[(h * dh + o) * d + k];
                    }
                }
                let mut dot = 0.0;
                for o in 0..dh {
                    dot += qh[o] * kh[o];
                }
                *score = dot / math::sqrt(dh as f64);
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut weights: Vec<f64> = scores.iter().map(|&z| math::exp(z - max)).collect();
            let total: f64 = weights.iter().sum();
            for w in weights.iter_mut() {
                *w /= total;
            }
            for (ci, &w) in weights.iter().enumerate() {
                let mut vh = vec![0.0f64; dh];
                for (o, vv) in vh.iter_mut().enumerate() {
                    for k in 0..d {
                        *vv += k_in(ci, k) * params.w_value[(h * dh + o) * d + k];
                    }
                }
                for o in 0..dh {
                    attended[ti * d + h * dh + o] += w * vh[o];
                }
            }
        }
    }
    for ti in 0..t {
        for out_k in 0..d {
            let mut y = 0.0;
            for in_k in 0..d {
                y += params.w_output[out_k * d + in_k] * attended[ti * d + in_k];
            }
            pooled[out_k] += y / t as f64;
        }
    }
    let mut logits = vec![0.0f64; n];
    for (ci, logit) in logits.iter_mut().enumerate() {
        let mut z = params.head_bias[ci];
        for k in 0..d {
            z += params.head_weight[ci * d + k] * pooled[k];
        }
        *logit = z;
    }
    RetrievalScores { logits }
}

/// Central finite-difference gradient of the retrieval loss with respect
/// to the logits.
pub fn loss_grad_fd(
    logits: &[f64],
    target_flat: usize,
    cfg: &LossConfig,
    spec: &MapSpec,
    step: f64,
) -> Vec<f64> {
    let eval = |z: &[f64]| -> f64 {
        let scores = RetrievalScores { logits: z.to_vec() };
        crate::retrieval::loss(
            &scores,
            &crate::geom::GridIndex::from_flat(target_flat, spec.grid_dim),
            cfg,
            spec,
        )
        .0
    };
    let mut grad = vec![0.0f64; logits.len()];
    let mut work = logits.to_vec();
    for i in 0..logits.len() {
        let orig = work[i];
        work[i] = orig + step;
        let up = eval(&work);
        work[i] = orig - step;
        let down = eval(&work);
        work[i] = orig;
        grad[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Optimal assignment between two point sets by the Hungarian algorithm
/// (O(n^3) Jonker-Volgenant style), returning for each left point the
/// matched right index. Cost is Euclidean distance.
pub fn hungarian_match(left: &[(f64, f64)], right: &[(f64, f64)]) -> Vec<usize> {
    let n = left.len();
    assert_eq!(n, right.len(), "hungarian_match needs equal set sizes");
    if n == 0 {
        return Vec::new();
    }
    let cost = |i: usize, j: usize| -> f64 {
        math::hypot(left[i].0 - right[j].0, left[i].1 - right[j].1)
    };
    // Standard shortest augmenting path formulation with potentials.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut matched = vec![n; n + 1]; // matched[j] = row assigned to column j (n = free)
    for i in 0..n {
        let mut j0 = n;
        matched[n] = i;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = n;
            for j in 0..n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == n {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == n {
                break;
            }
        }
    }
    let mut out = vec![0usize; n];
    for j in 0..n {
        if matched[j] < n {
            out[matched[j]] = j;
        }
    }
    out
}
