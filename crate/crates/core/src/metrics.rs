//! Localization metrics and report aggregation.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geom::{GridIndex, Pose2};
use crate::sensorsim::ContextName;

/// Threshold multiplier that normalizes recall against methods searching a
/// 30 m prior window instead of our 200 m one: 200/30 per dimension.
pub const SEARCH_SPACE_SCALE: f64 = 200.0 / 30.0;

/// Distance thresholds (meters) reported by default.
pub const DEFAULT_RECALL_THRESHOLDS: [f64; 4] = [1.0, 2.0, 5.0, 10.0];

/// Histogram bin width for the error distribution, meters.
pub const ERROR_HISTOGRAM_BIN_M: f64 = 0.25;
/// Histogram range cap; larger errors land in the overflow bin.
pub const ERROR_HISTOGRAM_MAX_M: f64 = 10.0;

/// Fraction of samples with error at most `d` meters.
pub fn recall_at(errors: &[f64], d: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(CoreError::UndefinedMetric);
    }
    let hits = errors.iter().filter(|&&e| e <= d).count();
    Ok(hits as f64 / errors.len() as f64)
}

/// Recall at the search-space-scaled threshold `d * 200/30`.
pub fn scaled_recall(errors: &[f64], d: f64) -> Result<f64> {
    recall_at(errors, d * SEARCH_SPACE_SCALE)
}

/// Per-sample evaluation outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: u64,
    pub context: ContextName,
    pub coarse_cell: GridIndex,
    pub truth_cell: GridIndex,
    pub coarse_hit_1x1: bool,
    pub coarse_hit_3x3: bool,
    pub est_pose: Pose2,
    pub truth_pose: Pose2,
    /// Euclidean position error in meters.
    pub position_error: f64,
    /// Displacement of the spawn position from the map center, meters.
    pub displacement: f64,
    pub inliers: usize,
    pub rms_px: f64,
    /// Fine alignment failed and the coarse cell center was reported.
    pub fallback: bool,
}

impl EvalRecord {
    pub fn from_prediction(
        sample_id: u64,
        context: ContextName,
        coarse_cell: GridIndex,
        truth_cell: GridIndex,
        est_pose: Pose2,
        truth_pose: Pose2,
        displacement: f64,
        inliers: usize,
        rms_px: f64,
        fallback: bool,
    ) -> Self {
        Self {
            sample_id,
            context,
            coarse_cell,
            truth_cell,
            coarse_hit_1x1: coarse_cell == truth_cell,
            coarse_hit_3x3: coarse_cell.chebyshev(&truth_cell) <= 1,
            est_pose,
            truth_pose,
            position_error: est_pose.distance(&truth_pose),
            displacement,
            inliers,
            rms_px,
            fallback,
        }
    }
}

/// Coarse accuracy over records: exact-cell and 3x3 (Chebyshev distance 1)
/// hit fractions.
pub fn coarse_metrics(records: &[EvalRecord]) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(CoreError::UndefinedMetric);
    }
    let n = records.len() as f64;
    let hit1 = records.iter().filter(|r| r.coarse_hit_1x1).count() as f64;
    let hit3 = records.iter().filter(|r| r.coarse_hit_3x3).count() as f64;
    Ok((hit1 / n, hit3 / n))
}

/// Aggregated metrics for one group of records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsGroup {
    pub samples: usize,
    pub top_1x1: f64,
    pub top_3x3: f64,
    /// `threshold -> recall`, keys formatted with one decimal.
    pub recall: BTreeMap<String, f64>,
    /// Scaled recall at the same nominal thresholds.
    pub scaled_recall: BTreeMap<String, f64>,
    /// Median position error over non-fallback samples, if any exist.
    pub median_error: Option<f64>,
    /// Fraction of samples that fell back to the coarse cell center.
    pub fallback_rate: f64,
    /// Error histogram over non-fallback samples: 0.25 m bins to 10 m plus
    /// one overflow bin.
    pub error_histogram: Vec<usize>,
}

/// Full evaluation report: overall metrics plus one group per context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: MetricsGroup,
    pub per_context: BTreeMap<String, MetricsGroup>,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn group_metrics(records: &[EvalRecord], thresholds: &[f64]) -> Result<MetricsGroup> {
    let (top_1x1, top_3x3) = coarse_metrics(records)?;
    let errors: Vec<f64> = records.iter().map(|r| r.position_error).collect();
    let mut recall = BTreeMap::new();
    let mut scaled = BTreeMap::new();
    for &d in thresholds {
        let key = alloc::format!("{d:.1}");
        recall.insert(key.clone(), recall_at(&errors, d)?);
        scaled.insert(key, scaled_recall(&errors, d)?);
    }

    // Fallback errors are coarse-cell-sized by construction, so the error
    // distribution is reported over genuine fine-stage estimates and the
    // failures show up as a separate rate.
    let mut fine_errors: Vec<f64> =
        records.iter().filter(|r| !r.fallback).map(|r| r.position_error).collect();
    fine_errors.sort_by(f64::total_cmp);
    let fallbacks = records.iter().filter(|r| r.fallback).count();

    let bins = (ERROR_HISTOGRAM_MAX_M / ERROR_HISTOGRAM_BIN_M) as usize;
    let mut error_histogram = alloc::vec![0usize; bins + 1];
    for &e in &fine_errors {
        let bin = (e / ERROR_HISTOGRAM_BIN_M) as usize;
        error_histogram[bin.min(bins)] += 1;
    }

    Ok(MetricsGroup {
        samples: records.len(),
        top_1x1,
        top_3x3,
        recall,
        scaled_recall: scaled,
        median_error: if fine_errors.is_empty() { None } else { Some(median(&fine_errors)) },
        fallback_rate: fallbacks as f64 / records.len() as f64,
        error_histogram,
    })
}

/// Aggregate records into the overall and per-context report. Records are
/// sorted by sample id first so the report is identical regardless of the
/// order a parallel evaluator produced them in.
pub fn aggregate_report(records: &mut [EvalRecord], thresholds: &[f64]) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(CoreError::UndefinedMetric);
    }
    records.sort_by_key(|r| r.sample_id);
    let overall = group_metrics(records, thresholds)?;
    let mut per_context = BTreeMap::new();
    for name in [ContextName::Day, ContextName::Night, ContextName::Rain, ContextName::Clean] {
        let group: Vec<EvalRecord> =
            records.iter().filter(|r| r.context == name).cloned().collect();
        if !group.is_empty() {
            per_context.insert(String::from(name.as_str()), group_metrics(&group, thresholds)?);
        }
    }
    Ok(MetricsReport { overall, per_context })
}

/// Median position error per displacement bin (meters), for the
/// robustness-vs-displacement curve. Returns `(bin_center, median, count)`
/// rows for bins holding at least `min_count` non-fallback samples.
pub fn median_error_by_displacement(
    records: &[EvalRecord],
    bin_width: f64,
    min_count: usize,
) -> Vec<(f64, f64, usize)> {
    let mut bins: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.fallback) {
        let bin = (r.displacement / bin_width) as usize;
        bins.entry(bin).or_default().push(r.position_error);
    }
    let mut out = Vec::new();
    for (bin, mut errors) in bins {
        if errors.len() < min_count {
            continue;
        }
        errors.sort_by(f64::total_cmp);
        out.push(((bin as f64 + 0.5) * bin_width, median(&errors), errors.len()));
    }
    out
}
