//! End-to-end experiment orchestration: per-sample evaluation in parallel,
//! deterministic aggregation, and report emission.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use semloc_core::dataset::Sample;
use semloc_core::descriptor::{BaseGrid, DescriptorConfig};
use semloc_core::finealign::{localize_or_fallback, RansacConfig};
use semloc_core::geom::MapSpec;
use semloc_core::metrics::{aggregate_report, EvalRecord, MetricsReport};
use semloc_core::descriptor::TokenGrid;
use semloc_core::retrieval::{encode_one, infer_cell, EncodeJob, QueryEncoder, RetrievalParams};
use semloc_core::temporal::fuse_frames;
use semloc_core::SemanticRaster;

use crate::error::{CliError, Result};
use crate::formats::REPORT_SCHEMA;

/// Fans query encoding out over the rayon pool; results come back in job
/// order, so training and evaluation stay deterministic.
pub struct RayonEncoder;

impl QueryEncoder for RayonEncoder {
    fn encode_batch(
        &self,
        desc: &DescriptorConfig,
        jobs: &[EncodeJob<'_>],
    ) -> semloc_core::error::Result<Vec<TokenGrid>> {
        jobs.par_iter().map(|job| encode_one(desc, job)).collect()
    }
}

/// Settings for one evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSettings {
    pub thresholds: Vec<f64>,
    pub rotations: usize,
    pub ransac: RansacConfig,
    /// Global seed XORed with each sample id for the per-sample RANSAC
    /// stream.
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            thresholds: semloc_core::metrics::DEFAULT_RECALL_THRESHOLDS.to_vec(),
            rotations: 8,
            ransac: RansacConfig::for_semantic_rasters(),
            seed: 0,
        }
    }
}

/// Localize one sample end to end and score it against its ground truth.
pub fn evaluate_sample(
    sample: &Sample,
    map: &SemanticRaster,
    base: &BaseGrid,
    params: &RetrievalParams,
    desc: &DescriptorConfig,
    spec: &MapSpec,
    settings: &EvalSettings,
) -> Result<EvalRecord> {
    let fused = fuse_frames(&sample.frames);
    let coarse = infer_cell(&fused.raster, base, params, desc, settings.rotations)
        .map_err(CliError::from)?;
    let fine = localize_or_fallback(
        &fused,
        map,
        &coarse,
        spec,
        &settings.ransac,
        settings.seed ^ sample.id,
    );
    let center = spec.extent_m / 2.0;
    let displacement =
        ((sample.truth_pose.x - center).powi(2) + (sample.truth_pose.y - center).powi(2)).sqrt();
    Ok(EvalRecord::from_prediction(
        sample.id,
        sample.context,
        coarse,
        sample.truth_cell,
        fine.pose,
        sample.truth_pose,
        displacement,
        fine.diagnostics.inliers,
        fine.diagnostics.rms_px,
        fine.diagnostics.fallback,
    ))
}

/// Evaluate every sample in parallel. Records come back sorted by sample
/// id, so the output is identical for any worker count.
pub fn evaluate_samples(
    samples: &[Sample],
    maps: &[SemanticRaster],
    bases: &[BaseGrid],
    params: &RetrievalParams,
    desc: &DescriptorConfig,
    spec: &MapSpec,
    settings: &EvalSettings,
) -> Result<Vec<EvalRecord>> {
    let mut records = samples
        .par_iter()
        .map(|sample| {
            evaluate_sample(
                sample,
                &maps[sample.map_id],
                &bases[sample.map_id],
                params,
                desc,
                spec,
                settings,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    records.sort_by_key(|r| r.sample_id);
    Ok(records)
}

/// Full report JSON document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportDocument {
    pub schema: String,
    pub samples: usize,
    pub thresholds: Vec<f64>,
    pub rotations: usize,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

pub fn build_report(records: &mut [EvalRecord], settings: &EvalSettings) -> Result<ReportDocument> {
    let metrics = aggregate_report(records, &settings.thresholds).map_err(CliError::from)?;
    Ok(ReportDocument {
        schema: REPORT_SCHEMA.to_string(),
        samples: records.len(),
        thresholds: settings.thresholds.clone(),
        rotations: settings.rotations,
        metrics,
    })
}

pub fn write_report_json(path: &Path, report: &ReportDocument) -> Result<()> {
    crate::formats::write_text(path, &format!("{}\n", serde_json::to_string_pretty(report)?))
}

/// Install a rayon pool with `workers` threads (0 = default) and run `f`
/// inside it.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::internal(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(f))
}
