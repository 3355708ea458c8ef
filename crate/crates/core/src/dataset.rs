//! Dataset construction: deterministic sampling of spawn poses, contexts,
//! trajectories and degradations, with a disjoint train/validation split
//! keyed on the sample id hash.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geom::{world_to_cell, GridIndex, MapSpec, Pose2};
use crate::retrieval::TrainSample;
use crate::rng::Rng;
use crate::sensorsim::{calibrate_profile, degrade, ContextName, ContextProfile};
use crate::temporal::{fuse_frames, simulate_trajectory, FrameSequence, TrajectoryConfig};
use crate::raster::SemanticRaster;
use crate::worldgen::sample_spawn_pose;

/// Train/validation membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

// Split ratio preserved from the reference protocol: 28130 train /
// 6019 validation samples.
const SPLIT_TRAIN_COUNT: u64 = 28_130;
const SPLIT_TOTAL_COUNT: u64 = 34_149;

/// Deterministic split assignment from the sample id alone.
pub fn split_of(id: u64) -> Split {
    // SplitMix64 finalizer as the id hash.
    let mut z = id.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    if z % SPLIT_TOTAL_COUNT < SPLIT_TRAIN_COUNT {
        Split::Train
    } else {
        Split::Val
    }
}

/// One benchmark sample: a frame burst with its hidden ground truth.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: u64,
    pub map_id: usize,
    pub context: ContextName,
    pub frames: FrameSequence,
    pub truth_pose: Pose2,
    pub truth_cell: GridIndex,
    pub split: Split,
}

impl Sample {
    /// The query raster the localizer sees: all frames fused into the
    /// latest ego window.
    pub fn fused_query(&self) -> SemanticRaster {
        fuse_frames(&self.frames).raster
    }

    /// Single-frame query (the latest frame only).
    pub fn latest_query(&self) -> &SemanticRaster {
        &self.frames.latest().raster
    }
}

/// Calibrated degradation profiles for every context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextProfiles {
    pub day: ContextProfile,
    pub night: ContextProfile,
    pub rain: ContextProfile,
    pub clean: ContextProfile,
}

impl ContextProfiles {
    /// Flip rates calibrated so each context preset hits its target IoU.
    pub fn calibrated(spec: &MapSpec, seeds: usize) -> Result<Self> {
        let calibrate = |name: ContextName| -> Result<ContextProfile> {
            let base = ContextProfile::preset(name);
            calibrate_profile(&base, base.target_iou, spec, seeds)
        };
        Ok(Self {
            day: calibrate(ContextName::Day)?,
            night: calibrate(ContextName::Night)?,
            rain: calibrate(ContextName::Rain)?,
            clean: ContextProfile::clean(),
        })
    }

    /// All contexts clean; used for noise-free benchmarks.
    pub fn all_clean() -> Self {
        let mut clean = ContextProfile::clean();
        Self {
            day: ContextProfile { name: ContextName::Day, ..clean },
            night: ContextProfile { name: ContextName::Night, ..clean },
            rain: ContextProfile { name: ContextName::Rain, ..clean },
            clean: {
                clean.name = ContextName::Clean;
                clean
            },
        }
    }

    pub fn get(&self, name: ContextName) -> &ContextProfile {
        match name {
            ContextName::Day => &self.day,
            ContextName::Night => &self.night,
            ContextName::Rain => &self.rain,
            ContextName::Clean => &self.clean,
        }
    }
}

/// Dataset construction knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n: usize,
    pub frame_count: usize,
    pub seed: u64,
    /// (context, weight) mixture; weights need not sum to one.
    pub contexts: Vec<(ContextName, f64)>,
    pub trajectory: TrajectoryConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            frame_count: 1,
            seed: 0,
            contexts: alloc::vec![
                (ContextName::Day, 0.7),
                (ContextName::Night, 0.15),
                (ContextName::Rain, 0.15),
            ],
            trajectory: TrajectoryConfig::default(),
        }
    }
}

/// Build sample `index` of the dataset. Deterministic in
/// `(maps, profiles, cfg, index)` alone, so samples can be built in any
/// order or in parallel.
pub fn build_sample(
    maps: &[SemanticRaster],
    spec: &MapSpec,
    profiles: &ContextProfiles,
    cfg: &DatasetConfig,
    index: u64,
) -> Result<Sample> {
    if maps.is_empty() {
        return Err(CoreError::InvalidConfig("no maps supplied".into()));
    }
    let total_weight: f64 = cfg.contexts.iter().map(|(_, w)| w).sum();
    if cfg.contexts.is_empty() || total_weight <= 0.0 {
        return Err(CoreError::InvalidConfig("context mixture is empty".into()));
    }

    let mut rng = Rng::substream(cfg.seed, index);
    let map_id = rng.below(maps.len());
    let draw = rng.uniform() * total_weight;
    let mut acc = 0.0;
    let mut context = cfg.contexts[0].0;
    for &(name, w) in &cfg.contexts {
        acc += w;
        if draw < acc {
            context = name;
            break;
        }
    }

    let start = sample_spawn_pose(&maps[map_id], spec, rng.next_u64())?;
    let mut seq = simulate_trajectory(
        &maps[map_id],
        spec,
        &start,
        cfg.frame_count,
        &cfg.trajectory,
        rng.next_u64(),
    )?;
    let profile = profiles.get(context);
    for frame in seq.frames.iter_mut() {
        *frame = degrade(frame, profile, rng.next_u64());
    }

    let truth_pose = seq.truth_pose();
    let truth_cell = world_to_cell(truth_pose.x, truth_pose.y, spec)?;
    Ok(Sample {
        id: index,
        map_id,
        context,
        frames: seq,
        truth_pose,
        truth_cell,
        split: split_of(index),
    })
}

/// Build the full dataset (see [`build_sample`]).
pub fn build_dataset(
    maps: &[SemanticRaster],
    spec: &MapSpec,
    profiles: &ContextProfiles,
    cfg: &DatasetConfig,
) -> Result<Vec<Sample>> {
    if cfg.n == 0 {
        return Err(CoreError::InvalidConfig("dataset size must be at least 1".into()));
    }
    (0..cfg.n as u64).map(|i| build_sample(maps, spec, profiles, cfg, i)).collect()
}

/// Convert samples of one split into retrieval training samples (fused
/// queries).
pub fn train_samples(samples: &[Sample], split: Split) -> Vec<TrainSample> {
    samples
        .iter()
        .filter(|s| s.split == split)
        .map(|s| TrainSample { query: s.fused_query(), map_id: s.map_id, target: s.truth_cell })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::{generate_map, WorldGenConfig};

    fn tiny_dataset_config() -> DatasetConfig {
        DatasetConfig { n: 8, ..Default::default() }
    }

    #[test]
    fn split_ratio_matches_reference_counts() {
        let n = 5000u64;
        let train = (0..n).filter(|&i| split_of(i) == Split::Train).count() as f64;
        let ratio = train / n as f64;
        let expect = SPLIT_TRAIN_COUNT as f64 / SPLIT_TOTAL_COUNT as f64;
        assert!((ratio - expect).abs() < 0.02, "ratio {ratio} vs {expect}");
    }

    #[test]
    fn dataset_is_deterministic() {
        let spec = MapSpec::default();
        let maps = [generate_map(&WorldGenConfig::default(), &spec).unwrap()];
        let profiles = ContextProfiles::all_clean();
        let cfg = tiny_dataset_config();
        let a = build_dataset(&maps, &spec, &profiles, &cfg).unwrap();
        let b = build_dataset(&maps, &spec, &profiles, &cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.truth_pose, y.truth_pose);
            assert_eq!(x.context, y.context);
            assert_eq!(x.latest_query().classes, y.latest_query().classes);
        }
    }

    #[test]
    fn single_context_mixture_tags_everything() {
        let spec = MapSpec::default();
        let maps = [generate_map(&WorldGenConfig::default(), &spec).unwrap()];
        let profiles = ContextProfiles::all_clean();
        let cfg = DatasetConfig {
            contexts: alloc::vec![(ContextName::Day, 1.0)],
            ..tiny_dataset_config()
        };
        let samples = build_dataset(&maps, &spec, &profiles, &cfg).unwrap();
        assert!(samples.iter().all(|s| s.context == ContextName::Day));
    }

    #[test]
    fn truth_cell_is_consistent_with_truth_pose() {
        let spec = MapSpec::default();
        let maps = [generate_map(&WorldGenConfig::default(), &spec).unwrap()];
        let profiles = ContextProfiles::all_clean();
        let samples = build_dataset(&maps, &spec, &profiles, &tiny_dataset_config()).unwrap();
        for s in &samples {
            let cell = world_to_cell(s.truth_pose.x, s.truth_pose.y, &spec).unwrap();
            assert_eq!(cell, s.truth_cell);
            assert_eq!(s.truth_pose, s.frames.truth_pose());
        }
    }

    #[test]
    fn samples_can_be_built_out_of_order() {
        let spec = MapSpec::default();
        let maps = [generate_map(&WorldGenConfig::default(), &spec).unwrap()];
        let profiles = ContextProfiles::all_clean();
        let cfg = tiny_dataset_config();
        let all = build_dataset(&maps, &spec, &profiles, &cfg).unwrap();
        let five = build_sample(&maps, &spec, &profiles, &cfg, 5).unwrap();
        assert_eq!(all[5].truth_pose, five.truth_pose);
        assert_eq!(all[5].latest_query().classes, five.latest_query().classes);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let spec = MapSpec::default();
        let maps = [generate_map(&WorldGenConfig::default(), &spec).unwrap()];
        let profiles = ContextProfiles::all_clean();
        let cfg = DatasetConfig { n: 0, ..Default::default() };
        assert!(build_dataset(&maps, &spec, &profiles, &cfg).is_err());
    }
}
