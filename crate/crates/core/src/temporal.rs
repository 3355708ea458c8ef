//! Multi-frame fusion: composites a short history of observations into one
//! richer query in the latest frame's ego frame.
//!
//! Fusion happens at the raster level: every past frame is resampled into
//! the current ego frame by chaining relative odometry, and overlapping
//! pixels take a per-class majority vote. The retrieval interface is
//! unchanged across frame counts; a fused observation is just a better
//! query.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geom::{se2_compose, se2_inverse, MapSpec, Pose2};
use crate::math;
use crate::raster::{SemanticRaster, NUM_CLASSES};
use crate::rng::Rng;
use crate::sensorsim::{render_observation, Observation};
use crate::worldgen::spawn_margin_px;

/// Frame counts mirrored from the temporal-fusion experiments.
pub const SUPPORTED_FRAME_COUNTS: [usize; 4] = [1, 2, 4, 8];

/// An ordered burst of observations (oldest first) with relative odometry
/// between consecutive frames.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub frames: Vec<Observation>,
    /// `rel_odometry[i]` takes frame `i`'s pose to frame `i+1`'s.
    pub rel_odometry: Vec<Pose2>,
    /// Seconds between frames.
    pub dt: f64,
}

impl FrameSequence {
    pub fn new(frames: Vec<Observation>, rel_odometry: Vec<Pose2>, dt: f64) -> Result<Self> {
        if !SUPPORTED_FRAME_COUNTS.contains(&frames.len()) {
            return Err(CoreError::BadFrameCount(frames.len()));
        }
        if rel_odometry.len() + 1 != frames.len() {
            return Err(CoreError::InvalidConfig(alloc::format!(
                "{} frames need {} odometry entries, got {}",
                frames.len(),
                frames.len() - 1,
                rel_odometry.len()
            )));
        }
        Ok(Self { frames, rel_odometry, dt })
    }

    /// The most recent observation.
    pub fn latest(&self) -> &Observation {
        self.frames.last().expect("frame sequences are never empty")
    }

    /// Ground-truth pose of the latest frame (what the localizer must
    /// recover).
    pub fn truth_pose(&self) -> Pose2 {
        self.latest().truth_pose
    }
}

/// Composite all frames into the latest frame's ego window.
///
/// Each output pixel collects one class vote per frame that observed it;
/// the majority wins and ties go to the class most recently seen there.
/// Pixels no frame observed stay background.
pub fn fuse_frames(seq: &FrameSequence) -> Observation {
    let n_frames = seq.frames.len();
    if n_frames == 1 {
        return seq.frames[0].clone();
    }
    let last = seq.latest();
    let (w, h) = (last.raster.width, last.raster.height);
    let res = last.raster.resolution;
    let half_u = w as f64 / 2.0;
    let half_v = h as f64 / 2.0;

    // chain[i] maps coordinates in the latest ego frame to frame i's ego
    // frame: pose_i^-1 * pose_last, assembled from relative odometry.
    let mut chains = vec![Pose2::identity(); n_frames];
    for i in (0..n_frames - 1).rev() {
        chains[i] = se2_compose(&seq.rel_odometry[i], &chains[i + 1]);
    }

    // Each frame casts nine nearest-class votes per canvas pixel (a 3x3
    // subpixel pattern); rotated frames then vote proportionally on
    // boundary pixels instead of aliasing a full pixel to one side.
    const T: f64 = 1.0 / 3.0;
    const SUBSAMPLES: [(f64, f64); 9] = [
        (-T, -T),
        (0.0, -T),
        (T, -T),
        (-T, 0.0),
        (0.0, 0.0),
        (T, 0.0),
        (-T, T),
        (0.0, T),
        (T, T),
    ];
    let mut votes = vec![[0u8; NUM_CLASSES]; w * h];
    let mut last_seen = vec![[0u8; NUM_CLASSES]; w * h];
    for (fi, frame) in seq.frames.iter().enumerate() {
        let chain = &chains[fi];
        let (s, c) = math::rot_components(chain.theta);
        for i in 0..h {
            for j in 0..w {
                for (du, dv) in SUBSAMPLES {
                    let fx = (j as f64 + 0.5 + du - half_u) * res;
                    let fy = -(i as f64 + 0.5 + dv - half_v) * res;
                    // Latest-frame coordinates into frame fi's coordinates.
                    let gx = chain.x + c * fx - s * fy;
                    let gy = chain.y + s * fx + c * fy;
                    let su = math::floor(gx / res + half_u) as i64;
                    let sv = math::floor(half_v - gy / res) as i64;
                    if frame.raster.in_bounds(sv, su) {
                        let class = frame.raster.get(sv as usize, su as usize) as usize;
                        votes[i * w + j][class] += 1;
                        last_seen[i * w + j][class] = fi as u8 + 1;
                    }
                }
            }
        }
    }

    let mut raster = SemanticRaster::filled(w, h, res);
    for (px, (vote, seen)) in votes.iter().zip(&last_seen).enumerate() {
        let mut best: Option<usize> = None;
        for class in 0..NUM_CLASSES {
            if vote[class] == 0 {
                continue;
            }
            best = match best {
                None => Some(class),
                Some(b)
                    if vote[class] > vote[b]
                        || (vote[class] == vote[b] && seen[class] > seen[b]) =>
                {
                    Some(class)
                }
                keep => keep,
            };
        }
        if let Some(b) = best {
            raster.classes[px] = b as u8;
        }
    }

    Observation {
        raster,
        context: last.context,
        truth_pose: last.truth_pose,
        truncated: seq.frames.iter().any(|f| f.truncated),
    }
}

/// Trajectory simulation knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    /// Constant speed, meters per second.
    pub speed: f64,
    /// Seconds between frames.
    pub dt: f64,
    /// Maximum per-step heading change, radians.
    pub max_turn: f64,
    /// Odometry noise: translation std per step, meters.
    pub odo_trans_std: f64,
    /// Odometry noise: rotation std per step, radians (0.2 degrees).
    pub odo_rot_std: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            speed: 10.0,
            dt: 0.5,
            max_turn: 0.10,
            odo_trans_std: 0.05,
            odo_rot_std: 0.2 * core::f64::consts::PI / 180.0,
        }
    }
}

/// Drive a constant-speed, bounded-curvature random walk from `start`,
/// rendering one clean observation per step. Relative odometry is the
/// ground-truth step composed with zero-mean Gaussian noise.
pub fn simulate_trajectory(
    map: &SemanticRaster,
    spec: &MapSpec,
    start: &Pose2,
    n_frames: usize,
    cfg: &TrajectoryConfig,
    rng_seed: u64,
) -> Result<FrameSequence> {
    if !SUPPORTED_FRAME_COUNTS.contains(&n_frames) {
        return Err(CoreError::BadFrameCount(n_frames));
    }
    let mut rng = Rng::new(rng_seed);
    let margin_m = spawn_margin_px(spec, spec.resolution) as f64 * spec.resolution;
    let inside = |p: &Pose2| -> bool {
        p.x >= margin_m
            && p.y >= margin_m
            && p.x <= spec.extent_m - margin_m
            && p.y <= spec.extent_m - margin_m
    };
    if !inside(start) {
        return Err(CoreError::TrajectoryExited);
    }

    let step_len = cfg.speed * cfg.dt;
    let mut truth = vec![*start];
    for _ in 1..n_frames {
        let prev = *truth.last().unwrap();
        let mut next = None;
        // Widen the allowed turn on retries so dead ends can be escaped
        // with a harder turn.
        for attempt in 0..30 {
            let spread = cfg.max_turn + 0.12 * attempt as f64;
            let turn = rng.range(-spread, spread);
            let candidate = se2_compose(&prev, &Pose2::new(0.0, step_len, turn));
            if inside(&candidate) {
                next = Some(candidate);
                break;
            }
        }
        match next {
            Some(p) => truth.push(p),
            None => return Err(CoreError::TrajectoryExited),
        }
    }

    let frames: Vec<Observation> =
        truth.iter().map(|pose| render_observation(map, pose, spec)).collect();
    let mut rel_odometry = Vec::with_capacity(n_frames.saturating_sub(1));
    for k in 0..n_frames - 1 {
        let exact = se2_compose(&se2_inverse(&truth[k]), &truth[k + 1]);
        let noise = Pose2::new(
            rng.normal() * cfg.odo_trans_std,
            rng.normal() * cfg.odo_trans_std,
            rng.normal() * cfg.odo_rot_std,
        );
        rel_odometry.push(se2_compose(&exact, &noise));
    }
    FrameSequence::new(frames, rel_odometry, cfg.dt)
}
