//! Fine-grained patch alignment: keypoint correspondences between the
//! observation and the retrieved 3x3-cell map patch, RANSAC homography
//! estimation on top of a normalized DLT, and projection of the ego center
//! into the global frame.
//!
//! Semantic rasters are piecewise constant, so corners of class boundaries
//! are the natural interest points: the detector runs a structure tensor
//! over the boundary-indicator image, and descriptors are rotation-
//! normalized class histograms sampled on rings around each keypoint.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geom::{
    apply_homography, cell_center, homography_to_se2, GridIndex, Homography, MapSpec, Pose2,
};
use crate::linalg::min_eigenvector;
use crate::math;
use crate::raster::{SemanticRaster, CLASS_BACKGROUND, NUM_CLASSES};
use crate::rng::Rng;
use crate::sensorsim::Observation;

/// Interest point on a class-boundary corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    /// Column coordinate, pixels (pixel centers at half-integers).
    pub u: f64,
    /// Row coordinate, pixels.
    pub v: f64,
    /// Dominant gradient orientation, radians in image coordinates.
    pub orientation: f64,
    /// Shi-Tomasi corner strength.
    pub strength: f64,
}

/// A putative point match between the query window and the map patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub query_pt: (f64, f64),
    pub patch_pt: (f64, f64),
    /// Descriptor similarity in [0, 1].
    pub score: f64,
}

/// RANSAC settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    /// Inlier gate on the symmetric transfer error, pixels.
    pub inlier_threshold: f64,
    pub max_iterations: usize,
    /// Early-exit confidence for the adaptive iteration bound.
    pub confidence: f64,
    /// Minimum inliers for a model to count as a localization.
    pub min_inliers: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { inlier_threshold: 1.5, max_iterations: 2000, confidence: 0.999, min_inliers: 12 }
    }
}

impl RansacConfig {
    /// Operating point for matching rendered semantic windows against map
    /// patches. Corner localization between a rotated render and an
    /// axis-aligned crop jitters by 1.5-2 px (the class-boundary band
    /// quantizes differently in each), so the inlier gate opens to 3 px;
    /// accuracy comes from the least-squares refit over the larger
    /// consensus, not from the gate.
    pub fn for_semantic_rasters() -> Self {
        Self { inlier_threshold: 3.0, ..Self::default() }
    }
}

/// Cut the 3x3-cell patch around `center` out of the map. Cells outside
/// the map stay background, so border centers still yield a full-size
/// patch.
pub fn extract_patch(map: &SemanticRaster, center: &GridIndex, spec: &MapSpec) -> SemanticRaster {
    let cell_px = spec.cell_px();
    let side = 3 * cell_px;
    let mut patch = SemanticRaster::filled(side, side, spec.resolution);
    let row0 = center.row as i64 * cell_px as i64 - cell_px as i64;
    let col0 = center.col as i64 * cell_px as i64 - cell_px as i64;
    for i in 0..side {
        let src_r = row0 + i as i64;
        if src_r < 0 || src_r >= map.height as i64 {
            continue;
        }
        for j in 0..side {
            let src_c = col0 + j as i64;
            if src_c >= 0 && src_c < map.width as i64 {
                patch.set(i, j, map.get(src_r as usize, src_c as usize));
            }
        }
    }
    patch
}

/// World coordinates of the patch frame: x of pixel column 0 and y of the
/// north edge (pixel row 0).
pub fn patch_origin(center: &GridIndex, spec: &MapSpec) -> (f64, f64) {
    let cell = spec.cell_m();
    let x0 = (center.col as f64 - 1.0) * cell;
    let y_top = spec.extent_m - (center.row as f64 - 1.0) * cell;
    (x0, y_top)
}

const NMS_RADIUS: usize = 5;
const TENSOR_SIGMA: f64 = 2.5;
const MAX_KEYPOINTS: usize = 512;
const STRENGTH_THRESHOLD: f64 = 0.015;
const ORIENT_WINDOW: i64 = 8;
const ORIENT_HIST_BINS: usize = 36;

/// Detect class-boundary corners: minimum eigenvalue of the smoothed
/// structure tensor of the boundary-indicator image, non-maximum
/// suppression of radius 5 px, capped at the 512 strongest. Each keypoint
/// carries its dominant gradient orientation.
pub fn detect_keypoints(raster: &SemanticRaster) -> Vec<Keypoint> {
    detect_keypoints_with_threshold(raster, STRENGTH_THRESHOLD)
}

/// [`detect_keypoints`] with an explicit strength threshold.
pub fn detect_keypoints_with_threshold(raster: &SemanticRaster, threshold: f64) -> Vec<Keypoint> {
    let (w, h) = (raster.width, raster.height);
    if w < 3 || h < 3 {
        return Vec::new();
    }
    let boundary = raster.boundary_indicator();
    let b = |r: usize, c: usize| boundary[r * w + c] as i32;

    let mut gx = vec![0i32; w * h];
    let mut gy = vec![0i32; w * h];
    for i in 1..h - 1 {
        for j in 1..w - 1 {
            gx[i * w + j] = (b(i - 1, j + 1) + 2 * b(i, j + 1) + b(i + 1, j + 1))
                - (b(i - 1, j - 1) + 2 * b(i, j - 1) + b(i + 1, j - 1));
            gy[i * w + j] = (b(i + 1, j - 1) + 2 * b(i + 1, j) + b(i + 1, j + 1))
                - (b(i - 1, j - 1) + 2 * b(i - 1, j) + b(i - 1, j + 1));
        }
    }

    // Structure tensor entries smoothed with a separable Gaussian.
    let kernel: [f64; 7] = {
        let sigma = TENSOR_SIGMA;
        let mut k = [0.0; 7];
        let mut total = 0.0;
        for (i, v) in k.iter_mut().enumerate() {
            let x = i as f64 - 3.0;
            *v = math::exp(-x * x / (2.0 * sigma * sigma));
            total += *v;
        }
        for v in k.iter_mut() {
            *v /= total;
        }
        k
    };
    let normalize = 1.0 / 16.0; // scale products of +-4 Sobel responses into O(1)
    let mut ixx = vec![0.0f64; w * h];
    let mut iyy = vec![0.0f64; w * h];
    let mut ixy = vec![0.0f64; w * h];
    for i in 0..h {
        for j in 0..w {
            let (x, y) = (gx[i * w + j] as f64, gy[i * w + j] as f64);
            ixx[i * w + j] = x * x * normalize;
            iyy[i * w + j] = y * y * normalize;
            ixy[i * w + j] = x * y * normalize;
        }
    }
    for buf in [&mut ixx, &mut iyy, &mut ixy] {
        separable_blur(buf, w, h, &kernel);
    }

    let mut response = vec![0.0f64; w * h];
    for p in 0..w * h {
        let half_trace = 0.5 * (ixx[p] + iyy[p]);
        let det_part = 0.25 * (ixx[p] - iyy[p]) * (ixx[p] - iyy[p]) + ixy[p] * ixy[p];
        response[p] = half_trace - math::sqrt(det_part);
    }

    // Non-maximum suppression; ties go to the earlier pixel in scan order.
    let mut keypoints: Vec<Keypoint> = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let r = response[i * w + j];
            if r <= threshold {
                continue;
            }
            let mut is_max = true;
            let lo_r = i.saturating_sub(NMS_RADIUS);
            let hi_r = (i + NMS_RADIUS).min(h - 1);
            let lo_c = j.saturating_sub(NMS_RADIUS);
            let hi_c = (j + NMS_RADIUS).min(w - 1);
            'window: for ni in lo_r..=hi_r {
                for nj in lo_c..=hi_c {
                    if ni == i && nj == j {
                        continue;
                    }
                    let other = response[ni * w + nj];
                    let earlier = (ni, nj) < (i, j);
                    if other > r || (other == r && earlier) {
                        is_max = false;
                        break 'window;
                    }
                }
            }
            if is_max {
                // Subpixel corner localization; half the inlier budget at
                // the RANSAC stage rides on it.
                let (u, v) = refine_corner(&gx, &gy, w, h, i, j, &response);
                // A corner sits on two class edges whose normals compete
                // for the dominant orientation, so every sufficiently
                // strong histogram peak becomes its own keypoint instance
                // and matching picks the consistent one.
                for orientation in dominant_orientations(raster, &gx, &gy, i, j) {
                    keypoints.push(Keypoint { u, v, orientation, strength: r });
                }
            }
        }
    }

    keypoints.sort_by(|a, b| {
        b.strength
            .total_cmp(&a.strength)
            .then(a.v.total_cmp(&b.v))
            .then(a.u.total_cmp(&b.u))
            .then(a.orientation.total_cmp(&b.orientation))
    });
    keypoints.truncate(MAX_KEYPOINTS);
    keypoints
}

/// Subpixel corner localization: the intersection point of the edge
/// normals in a small window (weighted least squares over the gradient
/// field), with a response-parabola fallback when the normal system is
/// ill-conditioned.
fn refine_corner(
    gx: &[i32],
    gy: &[i32],
    w: usize,
    h: usize,
    i: usize,
    j: usize,
    response: &[f64],
) -> (f64, f64) {
    const RADIUS: i64 = 4;
    let mut a11 = 0.0f64;
    let mut a12 = 0.0f64;
    let mut a22 = 0.0f64;
    let mut b1 = 0.0f64;
    let mut b2 = 0.0f64;
    for di in -RADIUS..=RADIUS {
        for dj in -RADIUS..=RADIUS {
            let (ni, nj) = (i as i64 + di, j as i64 + dj);
            if ni < 1 || nj < 1 || ni >= h as i64 - 1 || nj >= w as i64 - 1 {
                continue;
            }
            let (x, y) = (gx[ni as usize * w + nj as usize] as f64, gy[ni as usize * w + nj as usize] as f64);
            if x == 0.0 && y == 0.0 {
                continue;
            }
            let (pu, pv) = (nj as f64 + 0.5, ni as f64 + 0.5);
            a11 += x * x;
            a12 += x * y;
            a22 += y * y;
            b1 += x * x * pu + x * y * pv;
            b2 += x * y * pu + y * y * pv;
        }
    }
    let det = a11 * a22 - a12 * a12;
    if math::abs(det) > 1e-6 {
        let u = (a22 * b1 - a12 * b2) / det;
        let v = (a11 * b2 - a12 * b1) / det;
        let (du, dv) = (u - (j as f64 + 0.5), v - (i as f64 + 0.5));
        if math::abs(du) <= 2.0 && math::abs(dv) <= 2.0 {
            return (u, v);
        }
    }

    // Fallback: per-axis parabola on the response field.
    let mut du = 0.0;
    let mut dv = 0.0;
    let r = response[i * w + j];
    if j > 0 && j + 1 < w {
        let (l, rr) = (response[i * w + j - 1], response[i * w + j + 1]);
        let denom = l - 2.0 * r + rr;
        if math::abs(denom) > 1e-12 {
            du = (0.5 * (l - rr) / denom).clamp(-0.5, 0.5);
        }
    }
    if i > 0 && i + 1 < h {
        let (t, b) = (response[(i - 1) * w + j], response[(i + 1) * w + j]);
        let denom = t - 2.0 * r + b;
        if math::abs(denom) > 1e-12 {
            dv = (0.5 * (t - b) / denom).clamp(-0.5, 0.5);
        }
    }
    (j as f64 + 0.5 + du, i as f64 + 0.5 + dv)
}

fn separable_blur(buf: &mut [f64], w: usize, h: usize, kernel: &[f64; 7]) {
    let mut tmp = vec![0.0f64; w * h];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let jj = (j as i64 + k as i64 - 3).clamp(0, w as i64 - 1) as usize;
                acc += kv * buf[i * w + jj];
            }
            tmp[i * w + j] = acc;
        }
    }
    for j in 0..w {
        for i in 0..h {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let ii = (i as i64 + k as i64 - 3).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp[ii * w + j];
            }
            buf[i * w + j] = acc;
        }
    }
}

/// Per-class weights used to disambiguate gradient sign: each gradient is
/// flipped to point toward the lower-weight side, so directions along an
/// edge agree and rotate with the content.
const CLASS_ORIENT_WEIGHT: [f64; NUM_CLASSES] = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0];

/// Strong peaks of the magnitude-weighted gradient-orientation histogram
/// in a Gaussian window around the keypoint: the dominant orientation plus
/// at most one secondary peak within 80% of it, both parabolic-refined.
fn dominant_orientations(
    raster: &SemanticRaster,
    gx: &[i32],
    gy: &[i32],
    i: usize,
    j: usize,
) -> Vec<f64> {
    let (w, h) = (raster.width, raster.height);
    let two_pi = 2.0 * core::f64::consts::PI;
    let mut hist = [0.0f64; ORIENT_HIST_BINS];
    for di in -ORIENT_WINDOW..=ORIENT_WINDOW {
        for dj in -ORIENT_WINDOW..=ORIENT_WINDOW {
            let (ni, nj) = (i as i64 + di, j as i64 + dj);
            if ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                continue;
            }
            let (mut x, mut y) =
                (gx[ni as usize * w + nj as usize], gy[ni as usize * w + nj as usize]);
            if x == 0 && y == 0 {
                continue;
            }
            let mag = math::sqrt((x * x + y * y) as f64);

            // The boundary band is symmetric, so raw gradients come in
            // opposite pairs; anchor the sign on the class content ahead
            // of and behind the gradient.
            let probe = 2.0;
            let (fu, fv) = (nj as f64 + 0.5, ni as f64 + 0.5);
            let (dxn, dyn_) = (x as f64 / mag, y as f64 / mag);
            let ahead = class_weight_at(raster, fu + probe * dxn, fv + probe * dyn_);
            let behind = class_weight_at(raster, fu - probe * dxn, fv - probe * dyn_);
            if ahead > behind {
                x = -x;
                y = -y;
            }

            let weight = math::exp(-((di * di + dj * dj) as f64) / 32.0);
            let angle = (math::atan2(y as f64, x as f64) + two_pi) % two_pi;
            let bin = ((angle / two_pi * ORIENT_HIST_BINS as f64) as usize) % ORIENT_HIST_BINS;
            hist[bin] += mag * weight;
        }
    }

    // Circular smoothing stabilizes peaks against resampling noise.
    for _ in 0..2 {
        let prev = hist;
        for k in 0..ORIENT_HIST_BINS {
            let l = prev[(k + ORIENT_HIST_BINS - 1) % ORIENT_HIST_BINS];
            let r = prev[(k + 1) % ORIENT_HIST_BINS];
            hist[k] = 0.25 * l + 0.5 * prev[k] + 0.25 * r;
        }
    }

    let max = hist.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return alloc::vec![0.0];
    }
    let refine = |peak: usize| -> f64 {
        let left = hist[(peak + ORIENT_HIST_BINS - 1) % ORIENT_HIST_BINS];
        let right = hist[(peak + 1) % ORIENT_HIST_BINS];
        let center = hist[peak];
        let denom = left - 2.0 * center + right;
        let offset = if math::abs(denom) > 1e-12 { 0.5 * (left - right) / denom } else { 0.0 };
        let bin_width = two_pi / ORIENT_HIST_BINS as f64;
        math::normalize_angle((peak as f64 + 0.5 + offset.clamp(-0.5, 0.5)) * bin_width)
    };

    let mut peaks: Vec<(f64, usize)> = Vec::new();
    for k in 0..ORIENT_HIST_BINS {
        let l = hist[(k + ORIENT_HIST_BINS - 1) % ORIENT_HIST_BINS];
        let r = hist[(k + 1) % ORIENT_HIST_BINS];
        if hist[k] >= l && hist[k] > r && hist[k] >= 0.8 * max {
            peaks.push((hist[k], k));
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    peaks.truncate(2);
    peaks.into_iter().map(|(_, k)| refine(k)).collect()
}

fn class_weight_at(raster: &SemanticRaster, u: f64, v: f64) -> f64 {
    let (c, r) = (math::floor(u) as i64, math::floor(v) as i64);
    if raster.in_bounds(r, c) {
        CLASS_ORIENT_WEIGHT[raster.get(r as usize, c as usize) as usize]
    } else {
        CLASS_ORIENT_WEIGHT[CLASS_BACKGROUND as usize]
    }
}

const RING_RADII: [f64; 6] = [3.0, 6.0, 10.0, 14.0, 20.0, 28.0];
const RING_SECTORS: usize = 8;
const DESCRIPTOR_DIM: usize = RING_RADII.len() * RING_SECTORS * NUM_CLASSES;

/// Rotation-normalized class-annulus descriptor for one keypoint: classes
/// sampled on rings around it, binned by sector relative to the dominant
/// orientation. Samples split linearly between adjacent sectors so a few
/// degrees of orientation error shift weight instead of flipping bins;
/// rings are weight-normalized so near detail and far context contribute
/// equally, then the whole vector is L2-normalized.
pub fn describe(raster: &SemanticRaster, kp: &Keypoint) -> Vec<f64> {
    let two_pi = 2.0 * core::f64::consts::PI;
    let mut desc = vec![0.0f64; DESCRIPTOR_DIM];
    for (ring, &radius) in RING_RADII.iter().enumerate() {
        let samples = (two_pi * radius).max(16.0) as usize;
        let block = &mut desc[ring * RING_SECTORS * NUM_CLASSES..(ring + 1) * RING_SECTORS * NUM_CLASSES];
        let mut mass = 0.0;
        for k in 0..samples {
            let rel = k as f64 / samples as f64 * two_pi;
            let angle = kp.orientation + rel;
            let u = kp.u + radius * math::cos(angle);
            let v = kp.v + radius * math::sin(angle);
            let (c, r) = (math::floor(u) as i64, math::floor(v) as i64);
            // Samples beyond the raster contribute nothing, so a ring that
            // leaves a window edge fades in weight instead of polluting
            // the descriptor with a phantom background signature.
            if !raster.in_bounds(r, c) {
                continue;
            }
            let class = raster.get(r as usize, c as usize) as usize;
            let pos = rel / two_pi * RING_SECTORS as f64 - 0.5;
            let lo = math::floor(pos);
            let frac = pos - lo;
            let s0 = ((lo as i64).rem_euclid(RING_SECTORS as i64)) as usize;
            let s1 = (s0 + 1) % RING_SECTORS;
            block[s0 * NUM_CLASSES + class] += 1.0 - frac;
            block[s1 * NUM_CLASSES + class] += frac;
            mass += 1.0;
        }
        if mass > 0.0 {
            for v in block.iter_mut() {
                *v /= samples as f64;
            }
        }
    }
    let norm = math::sqrt(desc.iter().map(|v| v * v).sum());
    if norm > 0.0 {
        for v in desc.iter_mut() {
            *v /= norm;
        }
    }
    desc
}


/// One mutual-nearest-neighbor + Lowe-ratio pass between two described
/// keypoint sets. `gate` restricts which pairs may match at all.
fn mnn_ratio_pass(
    kq: &[Keypoint],
    dq: &[Vec<f64>],
    kp: &[Keypoint],
    dp: &[Vec<f64>],
    gate: impl Fn(usize, usize) -> bool,
) -> Vec<(usize, usize, f64)> {
    const LOWE_RATIO: f64 = 0.85;
    let sim = |qi: usize, pj: usize| -> f64 {
        dq[qi].iter().zip(&dp[pj]).map(|(x, y)| x * y).sum()
    };
    let same_spot = |a: &Keypoint, b: &Keypoint| -> bool {
        math::abs(a.u - b.u) < 3.0 && math::abs(a.v - b.v) < 3.0
    };

    // Best and second-best per query keypoint. A location can carry two
    // orientation instances, so the runner-up for the ratio test is the
    // best candidate at a genuinely different patch location, and
    // mutuality compares locations rather than instance indices.
    // Symmetric structures clone descriptors bit for bit; exact
    // similarity ties break toward the spatially nearest candidate so
    // identical twins resolve consistently, then toward the lower index.
    let dist2 = |a: &Keypoint, b: &Keypoint| -> f64 {
        (a.u - b.u) * (a.u - b.u) + (a.v - b.v) * (a.v - b.v)
    };
    let mut best_q: Vec<(usize, f64, f64)> = Vec::with_capacity(dq.len());
    for qi in 0..dq.len() {
        let (mut bi, mut b1) = (usize::MAX, f64::NEG_INFINITY);
        for pj in 0..dp.len() {
            if !gate(qi, pj) {
                continue;
            }
            let s = sim(qi, pj);
            let tie_closer = bi != usize::MAX
                && math::abs(s - b1) <= 1e-12
                && dist2(&kq[qi], &kp[pj]) < dist2(&kq[qi], &kp[bi]);
            if s > b1 + 1e-12 || tie_closer {
                b1 = s;
                bi = pj;
            }
        }
        if bi == usize::MAX {
            best_q.push((usize::MAX, 0.0, 0.0));
            continue;
        }
        let mut b2 = f64::NEG_INFINITY;
        for pj in 0..dp.len() {
            if !gate(qi, pj) || same_spot(&kp[pj], &kp[bi]) {
                continue;
            }
            let s = sim(qi, pj);
            if s > b2 {
                b2 = s;
            }
        }
        best_q.push((bi, b1, b2));
    }
    let mut best_p: Vec<usize> = vec![usize::MAX; dp.len()];
    for (pj, slot) in best_p.iter_mut().enumerate() {
        let (mut bi, mut b1) = (usize::MAX, f64::NEG_INFINITY);
        for qi in 0..dq.len() {
            if !gate(qi, pj) {
                continue;
            }
            let s = sim(qi, pj);
            let tie_closer = bi != usize::MAX
                && math::abs(s - b1) <= 1e-12
                && dist2(&kq[qi], &kp[pj]) < dist2(&kq[bi], &kp[pj]);
            if s > b1 + 1e-12 || tie_closer {
                b1 = s;
                bi = qi;
            }
        }
        *slot = bi;
    }

    let mut out = Vec::new();
    for (qi, &(pj, s1, s2)) in best_q.iter().enumerate() {
        if pj == usize::MAX || best_p[pj] == usize::MAX {
            continue;
        }
        if !same_spot(&kq[best_p[pj]], &kq[qi]) {
            continue;
        }
        // Ratio test on L2 distances of unit vectors: d^2 = 2 - 2s.
        let d1 = math::sqrt((2.0 - 2.0 * s1).max(0.0));
        let d2 = if s2 > f64::NEG_INFINITY {
            math::sqrt((2.0 - 2.0 * s2).max(0.0))
        } else {
            f64::INFINITY
        };
        if d1 > 1e-6 && d1 > LOWE_RATIO * d2 {
            continue;
        }
        out.push((qi, pj, s1.clamp(0.0, 1.0)));
    }
    out
}

/// Keep the best-scoring correspondence per query location; orientation
/// instances of one point otherwise produce duplicates.
fn dedup_by_query_location(mut accepted: Vec<Correspondence>) -> Vec<Correspondence> {
    accepted.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.query_pt.1.total_cmp(&b.query_pt.1))
            .then(a.query_pt.0.total_cmp(&b.query_pt.0))
    });
    let mut out: Vec<Correspondence> = Vec::new();
    for c in accepted {
        let dup = out.iter().any(|kept| {
            math::abs(kept.query_pt.0 - c.query_pt.0) < 0.6
                && math::abs(kept.query_pt.1 - c.query_pt.1) < 0.6
        });
        if !dup {
            out.push(c);
        }
    }
    out
}

/// Detected keypoints plus their descriptors for one raster.
struct Features {
    kps: Vec<Keypoint>,
    descs: Vec<Vec<f64>>,
}

fn extract_features(raster: &SemanticRaster) -> Features {
    let kps = detect_keypoints(raster);
    let descs = kps.iter().map(|k| describe(raster, k)).collect();
    Features { kps, descs }
}

/// Candidate correspondence sets between query and patch, strongest
/// first: the direct mutual-nearest-neighbor matches, then one set per
/// dominant rotation mode with the patch re-rendered at that heading so
/// both rasters carry the same resampling statistics.
fn candidate_correspondences(
    query_feats: &Features,
    patch: &SemanticRaster,
    patch_feats: &Features,
) -> Result<Vec<Vec<Correspondence>>> {
    let kq = &query_feats.kps;
    let dq = &query_feats.descs;
    let kp = &patch_feats.kps;
    let dp = &patch_feats.descs;
    if kq.len() < 4 || kp.len() < 4 {
        return Err(CoreError::InsufficientMatches { found: kq.len().min(kp.len()), needed: 4 });
    }

    let first_pass = mnn_ratio_pass(kq, dq, kp, dp, |_, _| true);
    if first_pass.is_empty() {
        return Err(CoreError::InsufficientMatches { found: 0, needed: 4 });
    }

    // Vote over the orientation difference of first-pass matches. True
    // matches agree on the vehicle heading; lookalike mismatches scatter.
    const DELTA_BINS: usize = 24;
    let two_pi = 2.0 * core::f64::consts::PI;
    let mut hist = [0.0f64; DELTA_BINS];
    for &(qi, pj, score) in &first_pass {
        let delta = kq[qi].orientation - kp[pj].orientation;
        let turn = (math::normalize_angle(delta) + two_pi) % two_pi;
        let bin = ((turn / two_pi * DELTA_BINS as f64) as usize) % DELTA_BINS;
        hist[bin] += score;
    }
    let mut modes: Vec<(f64, usize)> = (0..DELTA_BINS)
        .map(|b| {
            let mass =
                hist[(b + DELTA_BINS - 1) % DELTA_BINS] + hist[b] + hist[(b + 1) % DELTA_BINS];
            (mass, b)
        })
        .collect();
    modes.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    // Suppress modes overlapping a stronger one; grid-like worlds alias
    // the heading by a quarter turn, so the runners-up stay in play.
    let mut kept_bins: Vec<usize> = Vec::new();
    for &(mass, bin) in &modes {
        if mass <= 0.0 || kept_bins.len() == 3 {
            break;
        }
        let sep = kept_bins.iter().all(|&k| {
            let d = (bin as i64 - k as i64).rem_euclid(DELTA_BINS as i64);
            d.min(DELTA_BINS as i64 - d) > 2
        });
        if sep {
            kept_bins.push(bin);
        }
    }

    let direct = dedup_by_query_location(
        first_pass
            .iter()
            .map(|&(qi, pj, score)| Correspondence {
                query_pt: (kq[qi].u, kq[qi].v),
                patch_pt: (kp[pj].u, kp[pj].v),
                score,
            })
            .collect(),
    );

    let center = patch.width as f64 / 2.0;
    let mut sets: Vec<Vec<Correspondence>> = Vec::new();
    for &bin in &kept_bins {
        // Refine the mode to the circular mean of the votes near it; the
        // bin center alone can sit up to half a bin off the true heading.
        let coarse_delta = (bin as f64 + 0.5) / DELTA_BINS as f64 * two_pi;
        let (mut sin_acc, mut cos_acc) = (0.0f64, 0.0f64);
        for &(qi, pj, score) in &first_pass {
            let d = kq[qi].orientation - kp[pj].orientation;
            if math::abs(math::normalize_angle(d - coarse_delta))
                <= 1.5 * two_pi / DELTA_BINS as f64
            {
                sin_acc += score * math::sin(d);
                cos_acc += score * math::cos(d);
            }
        }
        let delta = if sin_acc != 0.0 || cos_acc != 0.0 {
            math::atan2(sin_acc, cos_acc)
        } else {
            math::normalize_angle(coarse_delta)
        };
        let turned = patch.rotated_by(delta);
        let turned_feats = extract_features(&turned);
        if turned_feats.kps.len() < 4 {
            continue;
        }
        let pairs =
            mnn_ratio_pass(kq, dq, &turned_feats.kps, &turned_feats.descs, |_, _| true);

        // Map matched points back into the original patch frame:
        // rotated_by(delta) samples source C + R_img(delta)(a - C).
        let (sd, cd) = math::rot_components(delta);
        let corrs: Vec<Correspondence> = pairs
            .into_iter()
            .map(|(qi, tj, score)| {
                let kt = &turned_feats.kps[tj];
                let patch_pt = if sd == 0.0 && cd == 1.0 {
                    (kt.u, kt.v)
                } else {
                    let (au, av) = (kt.u - center, kt.v - center);
                    (center + cd * au + sd * av, center - sd * au + cd * av)
                };
                Correspondence { query_pt: (kq[qi].u, kq[qi].v), patch_pt, score }
            })
            .collect();
        sets.push(dedup_by_query_location(corrs));
    }
    sets.push(direct);
    sets.sort_by(|a, b| b.len().cmp(&a.len()));
    Ok(sets)
}

/// Detect and describe both rasters, then match with mutual nearest
/// neighbors under a Lowe ratio test. Fails when fewer than four matches
/// survive, which callers treat as a localization failure.
///
/// Matching between a heading-up window and a north-up patch has to fight
/// the unknown rotation: a first pass votes for the dominant orientation
/// difference and the strongest gain comes from re-rendering the patch at
/// that heading so both rasters quantize alike. Matched points are mapped
/// back through the known rotation before being returned.
pub fn match_keypoints(
    query: &SemanticRaster,
    patch: &SemanticRaster,
) -> Result<Vec<Correspondence>> {
    let query_feats = extract_features(query);
    let patch_feats = extract_features(patch);
    let sets = candidate_correspondences(&query_feats, patch, &patch_feats)?;
    let best = sets.into_iter().next().unwrap_or_default();
    if best.len() < 4 {
        return Err(CoreError::InsufficientMatches { found: best.len(), needed: 4 });
    }
    Ok(best)
}

/// Hartley normalization: translate the centroid to the origin and scale
/// the mean distance to sqrt(2).
fn normalization_transform(points: &[(f64, f64)]) -> Homography {
    let n = points.len() as f64;
    let (mut cx, mut cy) = (0.0, 0.0);
    for p in points {
        cx += p.0;
        cy += p.1;
    }
    cx /= n;
    cy /= n;
    let mut mean_dist = 0.0;
    for p in points {
        mean_dist += math::hypot(p.0 - cx, p.1 - cy);
    }
    mean_dist /= n;
    let scale = if mean_dist > 1e-12 { core::f64::consts::SQRT_2 / mean_dist } else { 1.0 };
    Homography { m: [scale, 0.0, -scale * cx, 0.0, scale, -scale * cy, 0.0, 0.0, 1.0] }
}

/// Least-squares homography from point pairs via the normalized DLT:
/// Hartley-normalize both sides, stack the 2n x 9 design matrix, take the
/// null vector as the eigenvector of the smallest eigenvalue of A^T A and
/// denormalize.
pub fn dlt_homography(pairs: &[(&(f64, f64), &(f64, f64))]) -> Result<Homography> {
    if pairs.len() < 4 {
        return Err(CoreError::InsufficientMatches { found: pairs.len(), needed: 4 });
    }
    let src: Vec<(f64, f64)> = pairs.iter().map(|(q, _)| **q).collect();
    let dst: Vec<(f64, f64)> = pairs.iter().map(|(_, p)| **p).collect();
    let t_src = normalization_transform(&src);
    let t_dst = normalization_transform(&dst);

    let mut ata = [0.0f64; 81];
    let mut row = [0.0f64; 9];
    for (q, p) in src.iter().zip(&dst) {
        let (x, y) = apply_homography(&t_src, q.0, q.1)?;
        let (u, v) = apply_homography(&t_dst, p.0, p.1)?;
        for half in 0..2 {
            row.fill(0.0);
            if half == 0 {
                row[0] = -x;
                row[1] = -y;
                row[2] = -1.0;
                row[6] = u * x;
                row[7] = u * y;
                row[8] = u;
            } else {
                row[3] = -x;
                row[4] = -y;
                row[5] = -1.0;
                row[6] = v * x;
                row[7] = v * y;
                row[8] = v;
            }
            for a in 0..9 {
                if row[a] == 0.0 {
                    continue;
                }
                for bcol in 0..9 {
                    ata[a * 9 + bcol] += row[a] * row[bcol];
                }
            }
        }
    }

    let hvec = min_eigenvector(&ata, 9);
    let mut hn = [0.0f64; 9];
    hn.copy_from_slice(&hvec);
    let h_normalized = Homography { m: hn };
    // H = T_dst^-1 * Hn * T_src
    let h = t_dst.inverse()?.compose(&h_normalized.compose(&t_src)?)?;
    Homography::new(h.m)
}

fn collinear(a: &(f64, f64), b: &(f64, f64), c: &(f64, f64)) -> bool {
    let cross = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
    math::abs(cross) < 0.5
}

fn sample_is_degenerate(corrs: &[Correspondence], idx: &[usize; 4]) -> bool {
    for i in 0..4 {
        for j in (i + 1)..4 {
            let (a, b) = (&corrs[idx[i]], &corrs[idx[j]]);
            if math::hypot(a.query_pt.0 - b.query_pt.0, a.query_pt.1 - b.query_pt.1) < 1.0
                || math::hypot(a.patch_pt.0 - b.patch_pt.0, a.patch_pt.1 - b.patch_pt.1) < 1.0
            {
                return true;
            }
        }
    }
    for skip in 0..4 {
        let kept: Vec<&Correspondence> = (0..4).filter(|&k| k != skip).map(|k| &corrs[idx[k]]).collect();
        if collinear(&kept[0].query_pt, &kept[1].query_pt, &kept[2].query_pt)
            || collinear(&kept[0].patch_pt, &kept[1].patch_pt, &kept[2].patch_pt)
        {
            return true;
        }
    }
    false
}

fn symmetric_inliers(
    corrs: &[Correspondence],
    h: &Homography,
    threshold: f64,
) -> Option<(Vec<bool>, usize, f64)> {
    let hinv = h.inverse().ok()?;
    let mut mask = vec![false; corrs.len()];
    let mut count = 0usize;
    let mut sq_sum = 0.0;
    for (k, c) in corrs.iter().enumerate() {
        let Ok(fwd) = apply_homography(h, c.query_pt.0, c.query_pt.1) else { continue };
        let Ok(bwd) = apply_homography(&hinv, c.patch_pt.0, c.patch_pt.1) else { continue };
        let d_fwd2 = (fwd.0 - c.patch_pt.0) * (fwd.0 - c.patch_pt.0)
            + (fwd.1 - c.patch_pt.1) * (fwd.1 - c.patch_pt.1);
        let d_bwd2 = (bwd.0 - c.query_pt.0) * (bwd.0 - c.query_pt.0)
            + (bwd.1 - c.query_pt.1) * (bwd.1 - c.query_pt.1);
        // Symmetric transfer error: RMS of the forward and backward
        // residuals.
        let err = math::sqrt(0.5 * (d_fwd2 + d_bwd2));
        if err <= threshold {
            mask[k] = true;
            count += 1;
            sq_sum += d_fwd2;
        }
    }
    let rms = if count > 0 { math::sqrt(sq_sum / count as f64) } else { f64::INFINITY };
    Some((mask, count, rms))
}

/// Robust homography estimation: sample non-degenerate minimal sets, score
/// by symmetric transfer error, refit on the best consensus with the
/// least-squares DLT, and return the refit model with its inlier mask.
pub fn ransac_homography(
    corrs: &[Correspondence],
    cfg: &RansacConfig,
    rng_seed: u64,
) -> Result<(Homography, Vec<bool>)> {
    if corrs.len() < 4 {
        return Err(CoreError::InsufficientMatches { found: corrs.len(), needed: 4 });
    }
    let mut rng = Rng::new(rng_seed);
    let n = corrs.len();
    let mut best: Option<(usize, f64, Vec<bool>, Homography)> = None;
    let mut needed_iters = cfg.max_iterations;

    for iter in 0..cfg.max_iterations {
        if iter >= needed_iters {
            break;
        }
        let mut idx = [0usize; 4];
        for slot in 0..4 {
            loop {
                let candidate = rng.below(n);
                if !idx[..slot].contains(&candidate) {
                    idx[slot] = candidate;
                    break;
                }
            }
        }
        if sample_is_degenerate(corrs, &idx) {
            continue;
        }
        let pairs: Vec<(&(f64, f64), &(f64, f64))> =
            idx.iter().map(|&k| (&corrs[k].query_pt, &corrs[k].patch_pt)).collect();
        let Ok(h) = dlt_homography(&pairs) else { continue };
        let Some((mask, count, rms)) = symmetric_inliers(corrs, &h, cfg.inlier_threshold) else {
            continue;
        };
        let better = match &best {
            None => true,
            Some((bc, brms, _, _)) => count > *bc || (count == *bc && rms < *brms),
        };
        if better {
            best = Some((count, rms, mask, h));
            // Adaptive iteration bound from the inlier ratio.
            let w = count as f64 / n as f64;
            let p_outlier_free = w * w * w * w;
            if p_outlier_free > 1e-9 && p_outlier_free < 1.0 {
                let bound = math::ln(1.0 - cfg.confidence) / math::ln(1.0 - p_outlier_free);
                needed_iters = (bound.max(1.0) as usize + 1).min(cfg.max_iterations);
            } else if p_outlier_free >= 1.0 {
                needed_iters = iter + 1;
            }
        }
    }

    let Some((count, _, mask, h)) = best else {
        return Err(CoreError::AlignmentFailure { best_inliers: 0, needed: cfg.min_inliers.max(4) });
    };
    let needed = cfg.min_inliers.max(4);
    if count < needed {
        return Err(CoreError::AlignmentFailure { best_inliers: count, needed });
    }

    // Least-squares refit on the consensus set, then recount so the mask
    // matches the returned model.
    let inlier_pairs: Vec<(&(f64, f64), &(f64, f64))> = corrs
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(c, _)| (&c.query_pt, &c.patch_pt))
        .collect();
    let refit = dlt_homography(&inlier_pairs).unwrap_or(h);
    let (final_mask, final_count, _) = symmetric_inliers(corrs, &refit, cfg.inlier_threshold)
        .unwrap_or((mask, count, 0.0));
    if final_count < needed {
        return Err(CoreError::AlignmentFailure { best_inliers: final_count, needed });
    }
    Ok((refit, final_mask))
}

/// Diagnostics attached to each fine localization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FineDiagnostics {
    pub matches: usize,
    pub inliers: usize,
    pub rms_px: f64,
    /// Homography deviated from a scaled rotation beyond tolerance.
    pub non_rigid: bool,
    /// Fine alignment failed; the pose is the coarse cell center.
    pub fallback: bool,
}

/// Pose estimate plus diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineResult {
    pub pose: Pose2,
    pub diagnostics: FineDiagnostics,
}

/// Diverse pool of plausible RANSAC models: the per-iteration candidates
/// with the highest inlier counts whose center projections land at
/// genuinely different patch positions. On repetitive structure the true
/// model is regularly sampled yet outvoted, so the caller re-ranks the
/// pool by warped-content agreement instead of trusting the single best
/// consensus.
fn ransac_model_pool(
    corrs: &[Correspondence],
    cfg: &RansacConfig,
    rng_seed: u64,
    pool_size: usize,
) -> Vec<Homography> {
    if corrs.len() < 4 {
        return Vec::new();
    }
    let mut rng = Rng::new(rng_seed);
    let n = corrs.len();
    let center = |h: &Homography| apply_homography(h, 100.0, 100.0).ok();
    // (inlier count, center, model)
    let mut pool: Vec<(usize, (f64, f64), Homography)> = Vec::new();
    for _ in 0..cfg.max_iterations {
        let mut idx = [0usize; 4];
        for slot in 0..4 {
            loop {
                let candidate = rng.below(n);
                if !idx[..slot].contains(&candidate) {
                    idx[slot] = candidate;
                    break;
                }
            }
        }
        if sample_is_degenerate(corrs, &idx) {
            continue;
        }
        let pairs: Vec<(&(f64, f64), &(f64, f64))> =
            idx.iter().map(|&k| (&corrs[k].query_pt, &corrs[k].patch_pt)).collect();
        let Ok(h) = dlt_homography(&pairs) else { continue };
        let Some((_, count, _)) = symmetric_inliers(corrs, &h, cfg.inlier_threshold) else {
            continue;
        };
        if count < 4 {
            continue;
        }
        let Some(c) = center(&h) else { continue };
        // One slot per 3 px center bucket; keep the stronger model.
        if let Some(existing) = pool
            .iter_mut()
            .find(|(_, pc, _)| math::hypot(pc.0 - c.0, pc.1 - c.1) < 3.0)
        {
            if count > existing.0 {
                *existing = (count, c, h);
            }
            continue;
        }
        pool.push((count, c, h));
        if pool.len() > 4 * pool_size {
            pool.sort_by(|a, b| b.0.cmp(&a.0));
            pool.truncate(2 * pool_size);
        }
    }
    pool.sort_by(|a, b| b.0.cmp(&a.0));
    pool.truncate(pool_size);
    pool.into_iter().map(|(_, _, h)| h).collect()
}

/// Search a rigid neighborhood of `h` (translation and rotation about the
/// projected window center in patch space) for a better content
/// agreement. Returns the improved model, or None when `h` already sits
/// in the best basin nearby.
pub fn rigid_agreement_search(
    query: &SemanticRaster,
    patch: &SemanticRaster,
    h: &Homography,
) -> Option<Homography> {
    let (cu, cv) = apply_homography(h, query.width as f64 / 2.0, query.height as f64 / 2.0).ok()?;
    let moved = |base: &Homography, du: f64, dv: f64, dtheta: f64| -> Option<Homography> {
        let (s, c) = (math::sin(dtheta), math::cos(dtheta));
        let rot = Homography::new([c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]).ok()?;
        let about = Homography::translation(cu + du, cv + dv)
            .compose(&rot)
            .ok()?
            .compose(&Homography::translation(-cu, -cv))
            .ok()?;
        about.compose(base).ok()
    };

    let base_score = warp_agreement(query, patch, h);
    let mut best = (warp_agreement_sampled(query, patch, h, 3), 0.0f64, 0.0f64, 0.0f64);

    // Coarse sweep over the surrounding basin: the agreement bowl around
    // the true pose is a few pixels and degrees wide, so a 4 px / 4 deg
    // lattice cannot step over it.
    let mut dth_deg = -24.0f64;
    while dth_deg <= 24.0 {
        for dv in [-12.0f64, -8.0, -4.0, 0.0, 4.0, 8.0, 12.0] {
            for du in [-12.0f64, -8.0, -4.0, 0.0, 4.0, 8.0, 12.0] {
                if du == 0.0 && dv == 0.0 && dth_deg == 0.0 {
                    continue;
                }
                if let Some(hh) = moved(h, du, dv, dth_deg.to_radians()) {
                    let a = warp_agreement_sampled(query, patch, &hh, 3);
                    if a > best.0 {
                        best = (a, du, dv, dth_deg.to_radians());
                    }
                }
            }
        }
        dth_deg += 4.0;
    }

    // Pattern descent at shrinking steps; the final rounds sample every
    // pixel because the agreement peak at the true pose is subpixel-sharp.
    let (mut a0, mut du, mut dv, mut dth) = best;
    for (step_px, step_deg, stride) in [
        (2.0, 2.0, 2usize),
        (1.0, 1.0, 2),
        (0.5, 0.5, 2),
        (0.25, 0.25, 1),
        (0.12, 0.12, 1),
        (0.06, 0.06, 1),
    ] {
        let step_rad = (step_deg as f64).to_radians();
        // Re-baseline when the sampling stride changes.
        if let Some(hh) = moved(h, du, dv, dth) {
            a0 = warp_agreement_sampled(query, patch, &hh, stride);
        }
        loop {
            let mut improved = false;
            for (ddu, ddv, ddt) in [
                (step_px, 0.0, 0.0),
                (-step_px, 0.0, 0.0),
                (0.0, step_px, 0.0),
                (0.0, -step_px, 0.0),
                (0.0, 0.0, step_rad),
                (0.0, 0.0, -step_rad),
            ] {
                if let Some(hh) = moved(h, du + ddu, dv + ddv, dth + ddt) {
                    let a = warp_agreement_sampled(query, patch, &hh, stride);
                    if a > a0 {
                        a0 = a;
                        du += ddu;
                        dv += ddv;
                        dth += ddt;
                        improved = true;
                    }
                }
            }
            if !improved {
                break;
            }
        }
    }

    let final_full = moved(h, du, dv, dth)
        .map(|hh| (warp_agreement_sampled(query, patch, &hh, 2), hh));
    match final_full {
        Some((a, hh)) if a > base_score + 0.01 => Some(hh),
        _ => None,
    }
}

/// Verification score for a candidate alignment: mean foreground IoU
/// between the query classes and the patch classes sampled through the
/// homography on a coarse pixel grid. Keypoint consensus alone can be
/// fooled by repetitive structure; warped content cannot.
pub fn warp_agreement(query: &SemanticRaster, patch: &SemanticRaster, h: &Homography) -> f64 {
    warp_agreement_sampled(query, patch, h, 2)
}

/// [`warp_agreement`] with an explicit sampling stride.
pub fn warp_agreement_sampled(
    query: &SemanticRaster,
    patch: &SemanticRaster,
    h: &Homography,
    stride: usize,
) -> f64 {
    let mut inter = [0usize; NUM_CLASSES];
    let mut union = [0usize; NUM_CLASSES];
    let mut covered = 0usize;
    let mut total = 0usize;
    let mut i = 1usize;
    while i < query.height {
        let mut j = 1usize;
        while j < query.width {
            total += 1;
            let q = query.get(i, j) as usize;
            let (pu, pv) = match apply_homography(h, j as f64 + 0.5, i as f64 + 0.5) {
                Ok(p) => p,
                Err(_) => {
                    j += stride;
                    continue;
                }
            };
            let (pc, pr) = (math::floor(pu) as i64, math::floor(pv) as i64);
            // A window near the patch border legitimately maps part of the
            // query outside; those samples are uninformative rather than
            // wrong. A coverage floor below keeps a model from hiding
            // content by pushing it off the patch entirely.
            if !patch.in_bounds(pr, pc) {
                j += stride;
                continue;
            }
            covered += 1;
            let p = patch.get(pr as usize, pc as usize) as usize;
            if q == p {
                inter[q] += 1;
                union[q] += 1;
            } else {
                union[q] += 1;
                union[p] += 1;
            }
            j += stride;
        }
        i += stride;
    }
    if total == 0 || (covered as f64) < 0.35 * total as f64 {
        return 0.0;
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for k in 1..NUM_CLASSES {
        if union[k] > 0 {
            sum += inter[k] as f64 / union[k] as f64;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Align the observation against the 3x3 patch around the retrieved cell
/// and project the ego center to a global pose.
///
/// A seed homography comes from RANSAC over the mutual-nearest-neighbor
/// matches (relaxed gate); correspondences are then refined geometrically:
/// every detected query corner is re-associated with the patch corner its
/// projection lands on (non-maximum suppression guarantees at most one
/// candidate), and the model is refit at tightening thresholds. The final
/// inlier count must clear `cfg.min_inliers` at `cfg.inlier_threshold`.
///
/// The homography maps observation pixels to patch pixels; the window
/// center lands on the vehicle's map position and the rotation block gives
/// the heading (the row-axis flip between image and world coordinates
/// negates the recovered angle).
pub fn localize_fine(
    obs: &Observation,
    map: &SemanticRaster,
    coarse: &GridIndex,
    spec: &MapSpec,
    cfg: &RansacConfig,
    rng_seed: u64,
) -> Result<FineResult> {
    let patch = extract_patch(map, coarse, spec);
    let query_feats = extract_features(&obs.raster);
    let patch_feats = extract_features(&patch);
    let mut candidate_sets = candidate_correspondences(&query_feats, &patch, &patch_feats)?;

    // Last-chance pool fodder: the plain best-similarity association per
    // query corner, no mutuality or ratio gates. Its precision is low,
    // but four correct pairs among it are enough for the model pool, and
    // content verification weeds out everything else.
    {
        let mut greedy: Vec<Correspondence> = Vec::new();
        for (qi, d) in query_feats.descs.iter().enumerate() {
            let (mut bi, mut b1) = (usize::MAX, f64::NEG_INFINITY);
            for (pj, e) in patch_feats.descs.iter().enumerate() {
                let sim: f64 = d.iter().zip(e).map(|(x, y)| x * y).sum();
                if sim > b1 {
                    b1 = sim;
                    bi = pj;
                }
            }
            if bi != usize::MAX {
                greedy.push(Correspondence {
                    query_pt: (query_feats.kps[qi].u, query_feats.kps[qi].v),
                    patch_pt: (patch_feats.kps[bi].u, patch_feats.kps[bi].v),
                    score: b1.clamp(0.0, 1.0),
                });
            }
        }
        candidate_sets.push(dedup_by_query_location(greedy));
    }

    // Relaxed seed models, one per candidate set: a handful of agreeing
    // matches pins a homography; guided refinement harvests the full
    // consensus and warped-content verification picks the real one.
    let seed_cfg = RansacConfig {
        inlier_threshold: cfg.inlier_threshold.max(2.5),
        min_inliers: 4,
        max_iterations: cfg.max_iterations.min(1400),
        ..*cfg
    };
    let guided_radius = seed_cfg.inlier_threshold.max(3.0);

    struct Candidate {
        h: Homography,
        inliers: usize,
        rms_px: f64,
        agreement: f64,
        matches: usize,
    }
    let mut best: Option<Candidate> = None;
    let mut best_failure = 0usize;
    let mut seeds: Vec<(Homography, usize)> = Vec::new();
    for (set_idx, corrs) in candidate_sets.iter().enumerate() {
        if corrs.len() < 4 {
            continue;
        }
        for h in ransac_model_pool(corrs, &seed_cfg, rng_seed ^ (set_idx as u64) << 56, 10) {
            seeds.push((h, set_idx));
        }
    }
    // Rank seed models by a coarse content check and keep the plausible
    // few for full refinement.
    let mut scored: Vec<(f64, Homography, usize)> = seeds
        .into_iter()
        .map(|(h, set_idx)| (warp_agreement(&obs.raster, &patch, &h), h, set_idx))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    scored.truncate(8);

    for (_, seed_h, set_idx) in scored {
        let corrs = &candidate_sets[set_idx];

        // Guided re-association: project each query corner and claim the
        // patch corner within reach. NMS spacing makes the nearest
        // candidate unique.
        let mut h = seed_h;
        let mut guided: Vec<Correspondence> = Vec::new();
        for kp in &query_feats.kps {
            let Ok((pu, pv)) = apply_homography(&h, kp.u, kp.v) else { continue };
            let mut nearest: Option<(f64, &Keypoint)> = None;
            for cand in &patch_feats.kps {
                let d = math::hypot(cand.u - pu, cand.v - pv);
                if d <= guided_radius && nearest.map_or(true, |(bd, _)| d < bd) {
                    nearest = Some((d, cand));
                }
            }
            if let Some((_, cand)) = nearest {
                guided.push(Correspondence {
                    query_pt: (kp.u, kp.v),
                    patch_pt: (cand.u, cand.v),
                    score: 1.0,
                });
            }
        }
        let guided = dedup_by_query_location(guided);
        if guided.len() < 4 {
            continue;
        }

        // Iterative refit at tightening thresholds.
        let mut inliers = 0usize;
        let mut rms_px = f64::INFINITY;
        for threshold in [guided_radius, cfg.inlier_threshold] {
            let Some((mask, count, rms)) = symmetric_inliers(&guided, &h, threshold) else {
                break;
            };
            if count < 4 {
                break;
            }
            let pairs: Vec<(&(f64, f64), &(f64, f64))> = guided
                .iter()
                .zip(&mask)
                .filter(|(_, &m)| m)
                .map(|(c, _)| (&c.query_pt, &c.patch_pt))
                .collect();
            if let Ok(refit) = dlt_homography(&pairs) {
                h = refit;
            }
            inliers = count;
            rms_px = rms;
        }
        if let Some((_, count, rms)) = symmetric_inliers(&guided, &h, cfg.inlier_threshold) {
            if count >= 4 {
                inliers = count;
                rms_px = rms;
            }
        }
        if inliers < 4 {
            continue;
        }
        best_failure = best_failure.max(inliers);

        let agreement = warp_agreement(&obs.raster, &patch, &h);
        let better = match &best {
            None => true,
            Some(b) => agreement > b.agreement,
        };
        if better {
            best = Some(Candidate { h, inliers, rms_px, agreement, matches: corrs.len() });
        }
    }

    /// Candidate models whose warped content disagrees with the patch are
    /// corner coincidences on repetitive structure, not localizations.
    const MIN_WARP_AGREEMENT: f64 = 0.25;
    let Some(cand) = best else {
        return Err(CoreError::AlignmentFailure { best_inliers: best_failure, needed: cfg.min_inliers });
    };
    if cand.inliers < cfg.min_inliers || cand.agreement < MIN_WARP_AGREEMENT {
        return Err(CoreError::AlignmentFailure {
            best_inliers: cand.inliers,
            needed: cfg.min_inliers,
        });
    }
    let Candidate { mut h, mut inliers, mut rms_px, matches, .. } = cand;

    // The keypoint consensus can sit in a lattice-shifted or slightly
    // rotated optimum on repetitive structure. The warped-content
    // agreement landscape is decisive (the true pose scores near 1.0 on
    // clean data), so search a small rigid neighborhood of the model for
    // its basin and re-refine there. The search starts from the model's
    // rigid part: rigid moves of a projectively skewed estimate can never
    // reach the basin, and the ground truth transform is rigid anyway.
    let qc = obs.raster.width as f64 / 2.0;
    let rigid_start = (|| -> Result<Homography> {
        let (cu, cv) = apply_homography(&h, qc, qc)?;
        let phi = math::atan2(h.m[3] - h.m[1], h.m[0] + h.m[4]);
        let (sp, cp) = (math::sin(phi), math::cos(phi));
        Homography::translation(cu, cv)
            .compose(&Homography::new([cp, -sp, 0.0, sp, cp, 0.0, 0.0, 0.0, 1.0])?)?
            .compose(&Homography::translation(-qc, -qc))
    })()
    .unwrap_or(h);
    // A skewed 8-DoF fit can warp content into decent agreement while its
    // center projection sits meters off; the rigid landscape is the one
    // the truth lives in, so the searched rigid model replaces the
    // estimate whenever it explains the content at least as well.
    let current_agreement = warp_agreement(&obs.raster, &patch, &h);
    let searched = rigid_agreement_search(&obs.raster, &patch, &rigid_start)
        .unwrap_or(rigid_start);
    let polished = if warp_agreement(&obs.raster, &patch, &searched) + 0.02
        >= current_agreement
    {
        Some(searched)
    } else {
        None
    };
    if let Some(better) = polished {
        h = better;
        let mut guided: Vec<Correspondence> = Vec::new();
        for kp in &query_feats.kps {
            let Ok((pu, pv)) = apply_homography(&h, kp.u, kp.v) else { continue };
            let mut nearest: Option<(f64, &Keypoint)> = None;
            for cand in &patch_feats.kps {
                let d = math::hypot(cand.u - pu, cand.v - pv);
                if d <= 2.5 && nearest.map_or(true, |(bd, _)| d < bd) {
                    nearest = Some((d, cand));
                }
            }
            if let Some((_, c2)) = nearest {
                guided.push(Correspondence {
                    query_pt: (kp.u, kp.v),
                    patch_pt: (c2.u, c2.v),
                    score: 1.0,
                });
            }
        }
        let guided = dedup_by_query_location(guided);
        if guided.len() >= 4 {
            if let Some((mask, count, rms)) = symmetric_inliers(&guided, &h, 2.5) {
                if count >= 4 {
                    let pairs: Vec<(&(f64, f64), &(f64, f64))> = guided
                        .iter()
                        .zip(&mask)
                        .filter(|(_, &m)| m)
                        .map(|(c, _)| (&c.query_pt, &c.patch_pt))
                        .collect();
                    if let Ok(refit) = dlt_homography(&pairs) {
                        // Keep the refit only if it explains the content
                        // at least as well as the searched model.
                        let a_refit = warp_agreement_sampled(&obs.raster, &patch, &refit, 1);
                        let a_search = warp_agreement_sampled(&obs.raster, &patch, &h, 1);
                        if a_refit >= a_search {
                            h = refit;
                        }
                    }
                    inliers = count;
                    rms_px = rms;
                }
            }
        }
    }

    let half = spec.window_px() as f64 / 2.0;
    let (pu, pv) = apply_homography(&h, half, half)?;
    let (x0, y_top) = patch_origin(coarse, spec);
    let x = x0 + pu * spec.resolution;
    let y = y_top - pv * spec.resolution;

    let decomp = homography_to_se2(&h, spec.resolution);
    let theta = math::normalize_angle(-decomp.pose.theta);

    Ok(FineResult {
        pose: Pose2::new(x, y, theta),
        diagnostics: FineDiagnostics {
            matches,
            inliers,
            rms_px,
            non_rigid: decomp.non_rigid,
            fallback: false,
        },
    })
}

/// [`localize_fine`] with the documented failure policy: when matching or
/// RANSAC fails, report the coarse cell center with the fallback flag so
/// every sample stays scoreable.
pub fn localize_or_fallback(
    obs: &Observation,
    map: &SemanticRaster,
    coarse: &GridIndex,
    spec: &MapSpec,
    cfg: &RansacConfig,
    rng_seed: u64,
) -> FineResult {
    match localize_fine(obs, map, coarse, spec, cfg, rng_seed) {
        Ok(result) => result,
        Err(_) => {
            let (x, y) = cell_center(coarse, spec);
            FineResult {
                pose: Pose2::new(x, y, 0.0),
                diagnostics: FineDiagnostics {
                    matches: 0,
                    inliers: 0,
                    rms_px: f64::INFINITY,
                    non_rigid: false,
                    fallback: true,
                },
            }
        }
    }
}
