//! Observation simulation: renders ground-truth ego-centric BEV windows
//! from the base map and degrades them to a calibrated quality level per
//! operating context.
//!
//! The degradation operator stands in for a real segmentation stack. Three
//! knobs cover the failure modes of interest: smooth boundary jitter (edge
//! blur in rain), circular dropout blobs (structure missing at night) and
//! i.i.d. class flips (generic confusion). The flip rate is binary-searched
//! until the mean IoU against the undegraded window hits a target.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geom::{MapSpec, Pose2};
use crate::math;
use crate::raster::{mean_iou, SemanticRaster, CLASS_BACKGROUND, NUM_CLASSES};
use crate::rng::Rng;
use crate::worldgen::{generate_map, sample_spawn_pose, WorldGenConfig};

/// Operating context of an observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextName {
    Day,
    Night,
    Rain,
    Clean,
}

impl ContextName {
    pub fn as_str(&self) -> &'static str {
        match self {
            ContextName::Day => "day",
            ContextName::Night => "night",
            ContextName::Rain => "rain",
            ContextName::Clean => "clean",
        }
    }
}

/// Degradation profile for one operating context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextProfile {
    pub name: ContextName,
    /// Per-pixel probability of flipping to a different class.
    pub flip_rate: f64,
    /// Standard deviation of the smooth edge-displacement field, pixels.
    pub boundary_jitter: f64,
    /// Expected dropout blobs per observation.
    pub dropout_blob_rate: f64,
    /// Nominal blob radius, pixels.
    pub dropout_blob_radius: f64,
    /// Mean IoU against the undegraded window this profile is tuned for.
    pub target_iou: f64,
}

impl ContextProfile {
    /// No-op profile: `degrade` returns its input bit for bit.
    pub fn clean() -> Self {
        Self {
            name: ContextName::Clean,
            flip_rate: 0.0,
            boundary_jitter: 0.0,
            dropout_blob_rate: 0.0,
            dropout_blob_radius: 0.0,
            target_iou: 1.0,
        }
    }

    /// Base knobs per context, before flip-rate calibration. Night leans
    /// on dropout (missing structure), rain on boundary jitter (blurred
    /// road edges).
    pub fn preset(name: ContextName) -> Self {
        match name {
            ContextName::Clean => Self::clean(),
            ContextName::Day => Self {
                name,
                flip_rate: 0.0,
                boundary_jitter: 0.8,
                dropout_blob_rate: 0.5,
                dropout_blob_radius: 6.0,
                target_iou: 0.80,
            },
            ContextName::Night => Self {
                name,
                flip_rate: 0.0,
                boundary_jitter: 0.8,
                dropout_blob_rate: 4.0,
                dropout_blob_radius: 14.0,
                target_iou: 0.65,
            },
            ContextName::Rain => Self {
                name,
                flip_rate: 0.0,
                boundary_jitter: 2.8,
                dropout_blob_rate: 1.0,
                dropout_blob_radius: 8.0,
                target_iou: 0.68,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.flip_rate < 0.0
            || self.boundary_jitter < 0.0
            || self.dropout_blob_rate < 0.0
            || self.dropout_blob_radius < 0.0
        {
            return Err(CoreError::InvalidConfig("degradation rates must be >= 0".into()));
        }
        if !(self.target_iou > 0.0 && self.target_iou <= 1.0) {
            return Err(CoreError::InvalidConfig("target_iou must lie in (0, 1]".into()));
        }
        Ok(())
    }

    fn is_identity(&self) -> bool {
        self.flip_rate == 0.0 && self.boundary_jitter == 0.0 && self.dropout_blob_rate == 0.0
    }
}

/// An ego-centric BEV window.
///
/// The raster covers `window_m` x `window_m` with the vehicle at the
/// geometric center and its forward axis pointing up. `truth_pose` is
/// carried for dataset bookkeeping only; the localizer never reads it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub raster: SemanticRaster,
    pub context: ContextName,
    pub truth_pose: Pose2,
    /// Set when part of the window fell outside the map and was filled
    /// with background.
    pub truncated: bool,
}

/// Render the ground-truth observation window at `pose`.
///
/// Nearest-class resampling of the map under the rigid transform that puts
/// `pose` at the window center with its heading up; no interpolation across
/// class labels. Pixels falling outside the map become background and set
/// the truncation flag.
pub fn render_observation(map: &SemanticRaster, pose: &Pose2, spec: &MapSpec) -> Observation {
    let side = spec.window_px();
    let res = spec.resolution;
    let half = side as f64 / 2.0;
    let (s, c) = math::rot_components(pose.theta);
    // Sample positions expressed directly in map pixel units; u0/v0 are the
    // ego position in that frame.
    let u0 = pose.x / res;
    let v0 = (map.height as f64 * res - pose.y) / res;

    let mut raster = SemanticRaster::filled(side, side, res);
    let mut truncated = false;
    for i in 0..side {
        let dv = i as f64 + 0.5 - half;
        for j in 0..side {
            let du = j as f64 + 0.5 - half;
            // Window offsets (du east, dv south in the output image) map
            // through the pose rotation; the row axis flips sign twice.
            let um = u0 + c * du + s * dv;
            let vm = v0 - s * du + c * dv;
            let (col, row) = (math::floor(um) as i64, math::floor(vm) as i64);
            if map.in_bounds(row, col) {
                raster.set(i, j, map.get(row as usize, col as usize));
            } else {
                truncated = true;
            }
        }
    }
    Observation { raster, context: ContextName::Clean, truth_pose: *pose, truncated }
}

/// Apply a degradation profile: boundary jitter, then blob dropout, then
/// class flips. Deterministic in `(obs, profile, rng_seed)`.
pub fn degrade(obs: &Observation, profile: &ContextProfile, rng_seed: u64) -> Observation {
    if profile.is_identity() {
        let mut out = obs.clone();
        out.context = profile.name;
        return out;
    }
    let mut rng = Rng::new(rng_seed);
    let (w, h) = (obs.raster.width, obs.raster.height);
    let mut raster = obs.raster.clone();

    // Smooth displacement field, bilinear over a coarse lattice. Constant
    // regions map to themselves, so only class edges visibly move.
    if profile.boundary_jitter > 0.0 {
        const STEP: usize = 25;
        let gw = w / STEP + 2;
        let gh = h / STEP + 2;
        let mut field = Vec::with_capacity(gw * gh);
        for _ in 0..gw * gh {
            let dx = rng.normal() * profile.boundary_jitter;
            let dy = rng.normal() * profile.boundary_jitter;
            field.push((dx, dy));
        }
        let src = raster.clone();
        for i in 0..h {
            for j in 0..w {
                let fx = j as f64 / STEP as f64;
                let fy = i as f64 / STEP as f64;
                let (gx, gy) = (fx as usize, fy as usize);
                let (tx, ty) = (fx - gx as f64, fy - gy as f64);
                let f00 = field[gy * gw + gx];
                let f01 = field[gy * gw + gx + 1];
                let f10 = field[(gy + 1) * gw + gx];
                let f11 = field[(gy + 1) * gw + gx + 1];
                let dx = (f00.0 * (1.0 - tx) + f01.0 * tx) * (1.0 - ty)
                    + (f10.0 * (1.0 - tx) + f11.0 * tx) * ty;
                let dy = (f00.1 * (1.0 - tx) + f01.1 * tx) * (1.0 - ty)
                    + (f10.1 * (1.0 - tx) + f11.1 * tx) * ty;
                let sc = math::floor(j as f64 + 0.5 + dx) as i64;
                let sr = math::floor(i as f64 + 0.5 + dy) as i64;
                let sc = sc.clamp(0, w as i64 - 1) as usize;
                let sr = sr.clamp(0, h as i64 - 1) as usize;
                raster.set(i, j, src.get(sr, sc));
            }
        }
    }

    if profile.dropout_blob_rate > 0.0 {
        let blobs = rng.poisson(profile.dropout_blob_rate);
        for _ in 0..blobs {
            let cr = rng.below(h) as f64;
            let cc = rng.below(w) as f64;
            let radius = profile.dropout_blob_radius * rng.range(0.6, 1.4);
            let r2 = radius * radius;
            let lo_r = ((cr - radius).max(0.0)) as usize;
            let hi_r = ((cr + radius).min(h as f64 - 1.0)).max(0.0) as usize;
            let lo_c = ((cc - radius).max(0.0)) as usize;
            let hi_c = ((cc + radius).min(w as f64 - 1.0)).max(0.0) as usize;
            for i in lo_r..=hi_r {
                for j in lo_c..=hi_c {
                    let d2 = (i as f64 - cr) * (i as f64 - cr) + (j as f64 - cc) * (j as f64 - cc);
                    if d2 <= r2 {
                        raster.set(i, j, CLASS_BACKGROUND);
                    }
                }
            }
        }
    }

    if profile.flip_rate > 0.0 {
        for px in raster.classes.iter_mut() {
            if rng.chance(profile.flip_rate) {
                let other = rng.below(NUM_CLASSES - 1) as u8;
                *px = if other >= *px { other + 1 } else { other };
            }
        }
    }

    Observation {
        raster,
        context: profile.name,
        truth_pose: obs.truth_pose,
        truncated: obs.truncated,
    }
}

/// Seed of the fixed worlds used to measure calibration IoU.
const CALIBRATION_WORLD_SEED: u64 = 0xca11_b8a7;
/// Calibration observations are spread over several maps so the achieved
/// IoU is not tuned to one map's structure.
const CALIBRATION_MAPS: usize = 3;

/// Clean windows used as the calibration reference set.
fn calibration_observations(spec: &MapSpec, seeds: usize) -> Result<Vec<Observation>> {
    let mut out = Vec::with_capacity(seeds);
    for m in 0..CALIBRATION_MAPS {
        let config =
            WorldGenConfig { seed: CALIBRATION_WORLD_SEED + m as u64, ..Default::default() };
        let map = generate_map(&config, spec)?;
        let count = seeds / CALIBRATION_MAPS + usize::from(m < seeds % CALIBRATION_MAPS);
        for k in 0..count {
            let pose = sample_spawn_pose(
                &map,
                spec,
                CALIBRATION_WORLD_SEED.wrapping_add((m * seeds + k) as u64),
            )?;
            out.push(render_observation(&map, &pose, spec));
        }
    }
    Ok(out)
}

fn mean_iou_over(clean: &[Observation], profile: &ContextProfile) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (k, obs) in clean.iter().enumerate() {
        let noisy = degrade(obs, profile, 0x5eed ^ k as u64);
        if let Some(iou) = mean_iou(&obs.raster, &noisy.raster) {
            sum += iou;
            n += 1;
        }
    }
    if n == 0 {
        return Err(CoreError::UndefinedMetric);
    }
    Ok(sum / n as f64)
}

/// Mean IoU of `profile` against undegraded windows over `seeds`
/// calibration observations.
pub fn measure_profile_iou(profile: &ContextProfile, spec: &MapSpec, seeds: usize) -> Result<f64> {
    let clean = calibration_observations(spec, seeds)?;
    mean_iou_over(&clean, profile)
}

const FLIP_RATE_MAX: f64 = 0.9;
const CALIBRATION_TOLERANCE: f64 = 0.01;

/// Binary-search the flip rate of `base` until the mean IoU over a seeded
/// calibration set is within 0.01 of `target_iou`. The other knobs stay at
/// their preset values.
pub fn calibrate_profile(
    base: &ContextProfile,
    target_iou: f64,
    spec: &MapSpec,
    seeds: usize,
) -> Result<ContextProfile> {
    if !(target_iou > 0.3 && target_iou <= 1.0) {
        return Err(CoreError::InvalidConfig("target_iou must lie in (0.3, 1.0]".into()));
    }
    if target_iou == 1.0 {
        return Ok(ContextProfile { name: base.name, target_iou, ..ContextProfile::clean() });
    }

    let clean = calibration_observations(spec, seeds)?;
    let mut lo = 0.0f64; // flip rate giving the highest IoU
    let mut hi = FLIP_RATE_MAX;
    let probe = |flip: f64| -> Result<f64> {
        let p = ContextProfile { flip_rate: flip, target_iou, ..*base };
        mean_iou_over(&clean, &p)
    };
    let iou_at_lo = probe(lo)?;
    let iou_at_hi = probe(hi)?;
    if target_iou > iou_at_lo + CALIBRATION_TOLERANCE
        || target_iou < iou_at_hi - CALIBRATION_TOLERANCE
    {
        return Err(CoreError::Calibration { lo: iou_at_hi, hi: iou_at_lo, target: target_iou });
    }

    let mut flip = 0.0;
    for _ in 0..24 {
        flip = 0.5 * (lo + hi);
        let iou = probe(flip)?;
        if math::abs(iou - target_iou) <= CALIBRATION_TOLERANCE {
            break;
        }
        if iou > target_iou {
            lo = flip;
        } else {
            hi = flip;
        }
    }
    Ok(ContextProfile { flip_rate: flip, target_iou, ..*base })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::GridIndex;
    use core::f64::consts::PI;

    fn test_map() -> (SemanticRaster, MapSpec) {
        let spec = MapSpec::default();
        let map = generate_map(&WorldGenConfig::default(), &spec).unwrap();
        (map, spec)
    }

    #[test]
    fn axis_aligned_render_equals_direct_crop() {
        let (map, spec) = test_map();
        // Pose at the center of map pixel (420, 510), heading north.
        let pose = Pose2::new((510.0 + 0.5) * 0.5, 500.0 - (420.0 + 0.5) * 0.5, 0.0);
        let obs = render_observation(&map, &pose, &spec);
        assert!(!obs.truncated);
        // With the ego at the window's geometric center, the 200 px window
        // reaches 99 px north/west and 100 px south/east of the ego pixel.
        for i in 0..200 {
            for j in 0..200 {
                assert_eq!(obs.raster.get(i, j), map.get(420 + i - 99, 510 + j - 99));
            }
        }
        assert_eq!(mean_iou(&obs.raster, &obs.raster), Some(1.0));
    }

    #[test]
    fn half_turn_render_is_the_flipped_render() {
        let (map, spec) = test_map();
        let pose0 = Pose2::new((500.0 + 0.5) * 0.5, 500.0 - (500.0 + 0.5) * 0.5, 0.0);
        let pose_pi = Pose2::new(pose0.x, pose0.y, PI);
        let a = render_observation(&map, &pose_pi, &spec);
        let b = render_observation(&map, &pose0, &spec).raster.rotated_by(PI);
        assert_eq!(a.raster, b);
    }

    #[test]
    fn render_matches_matrix_route_oracle() {
        let (map, spec) = test_map();
        for k in 0..5u64 {
            let pose = sample_spawn_pose(&map, &spec, 400 + k).unwrap();
            let fast = render_observation(&map, &pose, &spec);
            let oracle = crate::testutil::render_observation_reference(&map, &pose, &spec);
            assert_eq!(fast.raster, oracle, "pose {pose:?}");
        }
    }

    #[test]
    fn out_of_map_window_truncates_to_background() {
        let (map, spec) = test_map();
        let pose = Pose2::new(5.0, 5.0, 0.7);
        let obs = render_observation(&map, &pose, &spec);
        assert!(obs.truncated);
        assert!(obs.raster.count_class(CLASS_BACKGROUND) > 0);
    }

    #[test]
    fn clean_profile_is_identity() {
        let (map, spec) = test_map();
        let pose = sample_spawn_pose(&map, &spec, 9).unwrap();
        let obs = render_observation(&map, &pose, &spec);
        let out = degrade(&obs, &ContextProfile::clean(), 1234);
        assert_eq!(out.raster, obs.raster);
    }

    #[test]
    fn degrade_is_deterministic() {
        let (map, spec) = test_map();
        let pose = sample_spawn_pose(&map, &spec, 10).unwrap();
        let obs = render_observation(&map, &pose, &spec);
        let profile = ContextProfile::preset(ContextName::Night);
        let a = degrade(&obs, &profile, 77);
        let b = degrade(&obs, &profile, 77);
        assert_eq!(a.raster, b.raster);
        let c = degrade(&obs, &profile, 78);
        assert_ne!(a.raster, c.raster);
    }

    #[test]
    fn iou_is_monotone_in_flip_rate() {
        let spec = MapSpec::default();
        let mut last = f64::INFINITY;
        for flip in [0.0, 0.05, 0.15, 0.3, 0.5] {
            let profile = ContextProfile {
                flip_rate: flip,
                ..ContextProfile { name: ContextName::Day, ..ContextProfile::clean() }
            };
            let iou = measure_profile_iou(&profile, &spec, 100).unwrap();
            assert!(iou <= last + 1e-9, "flip {flip}: IoU {iou} rose above {last}");
            last = iou;
        }
    }

    #[test]
    fn calibrate_to_one_returns_identity_profile() {
        let spec = MapSpec::default();
        let p = calibrate_profile(&ContextProfile::preset(ContextName::Day), 1.0, &spec, 10)
            .unwrap();
        assert_eq!(p.flip_rate, 0.0);
        assert_eq!(p.boundary_jitter, 0.0);
        assert_eq!(p.dropout_blob_rate, 0.0);
    }

    #[test]
    fn calibrate_hits_caf_quality_target() {
        let spec = MapSpec::default();
        let base = ContextProfile::preset(ContextName::Day);
        let p = calibrate_profile(&base, 0.75, &spec, 120).unwrap();
        let achieved = measure_profile_iou(&p, &spec, 120).unwrap();
        assert!((0.74..=0.76).contains(&achieved), "achieved {achieved}");
        // Fresh seeds move the estimate only within the stated band.
        let fresh = fresh_mean_iou(&p, &spec, 200);
        assert!((fresh - 0.75).abs() <= 0.03, "fresh-seed IoU {fresh}");
    }

    #[test]
    fn calibrate_hits_bevfusion_quality_target() {
        let spec = MapSpec::default();
        let base = ContextProfile::preset(ContextName::Day);
        let p = calibrate_profile(&base, 0.627, &spec, 120).unwrap();
        let achieved = measure_profile_iou(&p, &spec, 120).unwrap();
        assert!((0.617..=0.637).contains(&achieved), "achieved {achieved}");
        let fresh = fresh_mean_iou(&p, &spec, 200);
        assert!((fresh - 0.627).abs() <= 0.03, "fresh-seed IoU {fresh}");
    }

    #[test]
    fn unreachable_target_reports_range() {
        let spec = MapSpec::default();
        // Night preset alone already costs more than 0.01 IoU, so a target
        // of 0.999 cannot be reached by lowering the flip rate.
        let base = ContextProfile::preset(ContextName::Night);
        match calibrate_profile(&base, 0.999, &spec, 60) {
            Err(CoreError::Calibration { lo, hi, target }) => {
                assert!(lo < hi && hi < target);
            }
            other => panic!("expected calibration error, got {other:?}"),
        }
    }

    /// Mean IoU over seeds disjoint from the calibration stream.
    fn fresh_mean_iou(profile: &ContextProfile, spec: &MapSpec, n: usize) -> f64 {
        let config = WorldGenConfig { seed: 4242, ..Default::default() };
        let map = generate_map(&config, spec).unwrap();
        let mut sum = 0.0;
        for k in 0..n {
            let pose = sample_spawn_pose(&map, spec, 90_000 + k as u64).unwrap();
            let clean = render_observation(&map, &pose, spec);
            let noisy = degrade(&clean, profile, 70_000 + k as u64);
            sum += mean_iou(&clean.raster, &noisy.raster).unwrap();
        }
        sum / n as f64
    }

    #[test]
    fn render_center_lands_in_truth_cell() {
        let (map, spec) = test_map();
        for k in 0..20u64 {
            let pose = sample_spawn_pose(&map, &spec, 200 + k).unwrap();
            let cell = crate::geom::world_to_cell(pose.x, pose.y, &spec).unwrap();
            assert!(cell.row < spec.grid_dim && cell.col < spec.grid_dim);
            let _ = GridIndex::new(cell.row, cell.col);
        }
    }
}
