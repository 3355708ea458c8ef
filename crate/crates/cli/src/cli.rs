//! Command-line entry point: one binary with `worldgen`, `dataset`,
//! `train`, `localize` and `eval` subcommands, each a reproducible stage
//! of the benchmark.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use semloc_core::dataset::{
    build_sample, train_samples, ContextProfiles, DatasetConfig, Sample, Split,
};
use semloc_core::descriptor::DescriptorConfig;
use semloc_core::finealign::{localize_or_fallback, RansacConfig};
use semloc_core::geom::MapSpec;
use semloc_core::retrieval::{infer_cell, train_with_encoder, LossConfig, TrainConfig};
use semloc_core::sensorsim::ContextName;
use semloc_core::temporal::{fuse_frames, TrajectoryConfig};
use semloc_core::worldgen::{generate_map, WorldGenConfig};
use semloc_core::SemanticRaster;

use crate::error::{CliError, Result};
use crate::experiment::{build_report, evaluate_samples, with_workers, EvalSettings};
use crate::formats;
use crate::plots;

const VERSION_LINE: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (formats: bmm-map/1, bmm-dataset/1, bmm-report/1, BMMG, BMMP v1)"
);

#[derive(Debug, Parser)]
#[command(name = "semloc", version = VERSION_LINE)]
#[command(about = "GNSS-free hierarchical map-matching localization benchmark")]
pub struct CliArgs {
    /// Emit machine-readable error JSON on stderr.
    #[arg(long, global = true)]
    pub json_errors: bool,
    /// Worker threads for parallel sample processing (0 = all cores).
    /// Output is identical for any worker count.
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,
    /// JSON run-configuration file; explicit flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate semantic base maps.
    Worldgen(WorldgenArgs),
    /// Build a benchmark dataset from generated maps.
    Dataset(DatasetArgs),
    /// Train the coarse retrieval head.
    Train(TrainArgs),
    /// Localize a single stored sample and print the pose as JSON.
    Localize(LocalizeArgs),
    /// Evaluate trained parameters over a dataset and emit reports.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct WorldgenArgs {
    /// Seed of the first map; map k uses seed + k.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of maps to generate.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Directory holding the map images.
    #[arg(long)]
    pub maps: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of samples.
    #[arg(long)]
    pub n: Option<usize>,
    /// Frames per sample (1, 2, 4 or 8).
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Context mixture, e.g. "day:0.7,night:0.15,rain:0.15" or "clean".
    #[arg(long)]
    pub contexts: Option<String>,
    /// Observations per IoU measurement during profile calibration.
    #[arg(long, default_value_t = 120)]
    pub calibration_seeds: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub maps: PathBuf,
    /// Output parameter file; the learning curve CSV lands next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub sigma_d: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    /// Sample directory (one element of a dataset's samples/).
    #[arg(long)]
    pub sample: PathBuf,
    /// Map image the sample was drawn on.
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Query rotations scored at retrieval time.
    #[arg(long)]
    pub rotations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub maps: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Recall thresholds in meters, e.g. "1,2,5,10".
    #[arg(long)]
    pub thresholds: Option<String>,
    #[arg(long)]
    pub rotations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// JSON run configuration; unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub map_spec: MapSpec,
    pub worldgen: WorldGenConfig,
    pub contexts: Vec<(ContextName, f64)>,
    pub dataset: DatasetSection,
    pub train: TrainSection,
    pub ransac: RansacConfig,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub n: usize,
    pub frames: usize,
    pub seed: u64,
    pub trajectory: TrajectoryConfig,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { n: 1000, frames: 1, seed: 0, trajectory: TrajectoryConfig::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lambda: f64,
    pub sigma_d: f64,
    pub seed: u64,
    pub eval_rotations: usize,
    pub descriptor: DescriptorConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.learning_rate,
            epochs: t.epochs,
            batch: t.batch_size,
            lambda: t.loss.lambda,
            sigma_d: t.loss.sigma_d,
            seed: t.seed,
            eval_rotations: t.eval_rotations,
            descriptor: t.descriptor,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub thresholds: Vec<f64>,
    pub rotations: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let s = EvalSettings::default();
        Self { thresholds: s.thresholds, rotations: s.rotations, seed: s.seed }
    }
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display())))?;
                let cfg: RunConfig = serde_json::from_str(&text)
                    .map_err(|e| CliError::usage(format!("invalid config {}: {e}", p.display())))?;
                cfg.map_spec.validate().map_err(CliError::from)?;
                Ok(cfg)
            }
        }
    }
}

pub fn run(args: CliArgs) -> Result<()> {
    let config = RunConfig::load(args.config.as_deref())?;
    let workers = args.workers;
    match args.command {
        Command::Worldgen(a) => cmd_worldgen(a, &config),
        Command::Dataset(a) => with_workers(workers, move || cmd_dataset(a, &config))?,
        Command::Train(a) => cmd_train(a, &config),
        Command::Localize(a) => cmd_localize(a, &config),
        Command::Eval(a) => with_workers(workers, move || cmd_eval(a, &config))?,
    }
}

fn cmd_worldgen(args: WorldgenArgs, config: &RunConfig) -> Result<()> {
    if args.count == 0 {
        return Err(CliError::usage("--count must be at least 1"));
    }
    let base_seed = args.seed.unwrap_or(config.worldgen.seed);
    for k in 0..args.count {
        let wg = WorldGenConfig { seed: base_seed + k as u64, ..config.worldgen };
        let map = generate_map(&wg, &config.map_spec).map_err(CliError::from)?;
        let sidecar = formats::MapSidecar {
            version: formats::MAP_SIDECAR_VERSION.to_string(),
            seed: wg.seed,
            spec: config.map_spec,
            worldgen: wg,
            palette: semloc_core::raster::CLASS_PALETTE.to_vec(),
        };
        formats::write_map(&args.out, &format!("map_{:016x}", wg.seed), &map, &sidecar)?;
    }
    println!(
        "{}",
        serde_json::json!({ "written": args.count, "out": args.out, "seed": base_seed })
    );
    Ok(())
}

/// Load every map in a directory, verifying hashes against the dataset
/// index when one is given.
fn load_maps(
    maps_dir: &Path,
    index: Option<&formats::DatasetIndex>,
) -> Result<(Vec<PathBuf>, Vec<SemanticRaster>, MapSpec)> {
    let paths = formats::list_maps(maps_dir)?;
    let mut rasters = Vec::with_capacity(paths.len());
    let mut spec = None;
    for p in &paths {
        let (raster, sidecar) = formats::read_map(p)?;
        if let Some(existing) = spec {
            if existing != sidecar.spec {
                return Err(CliError::data(format!(
                    "maps in {} disagree on their map spec",
                    maps_dir.display()
                )));
            }
        }
        spec = Some(sidecar.spec);
        rasters.push(raster);
    }
    let spec = spec.expect("list_maps guarantees at least one map");
    if let Some(index) = index {
        if index.maps.len() != paths.len() {
            return Err(CliError::format_mismatch(
                "map directory does not match the dataset index",
                format!("{} maps", index.maps.len()),
                format!("{} maps", paths.len()),
            ));
        }
        for (map_ref, (path, raster)) in index.maps.iter().zip(paths.iter().zip(&rasters)) {
            let hash = raster.content_hash();
            if hash != map_ref.hash {
                return Err(CliError::format_mismatch(
                    format!("map {} does not match the dataset index", path.display()),
                    format!("{:016x}", map_ref.hash),
                    format!("{hash:016x}"),
                ));
            }
        }
    }
    Ok((paths, rasters, spec))
}

fn parse_contexts(text: &str) -> Result<Vec<(ContextName, f64)>> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (name, weight) = match part.split_once(':') {
            Some((n, w)) => (
                n.trim(),
                w.trim()
                    .parse::<f64>()
                    .map_err(|_| CliError::usage(format!("bad context weight in '{part}'")))?,
            ),
            None => (part, 1.0),
        };
        let name = match name {
            "day" => ContextName::Day,
            "night" => ContextName::Night,
            "rain" => ContextName::Rain,
            "clean" => ContextName::Clean,
            other => return Err(CliError::usage(format!("unknown context '{other}'"))),
        };
        out.push((name, weight));
    }
    if out.is_empty() {
        return Err(CliError::usage("context list is empty"));
    }
    Ok(out)
}

fn cmd_dataset(args: DatasetArgs, config: &RunConfig) -> Result<()> {
    let n = args.n.unwrap_or(config.dataset.n);
    if n == 0 {
        return Err(CliError::usage("--n must be at least 1"));
    }
    let frames = args.frames.unwrap_or(config.dataset.frames);
    let seed = args.seed.unwrap_or(config.dataset.seed);
    let contexts = match &args.contexts {
        Some(text) => parse_contexts(text)?,
        None if !config.contexts.is_empty() => config.contexts.clone(),
        None => DatasetConfig::default().contexts,
    };

    let (paths, rasters, spec) = load_maps(&args.maps, None)?;
    let needs_degradation =
        contexts.iter().any(|(name, w)| *name != ContextName::Clean && *w > 0.0);
    let profiles = if needs_degradation {
        ContextProfiles::calibrated(&spec, args.calibration_seeds).map_err(CliError::from)?
    } else {
        ContextProfiles::all_clean()
    };

    let dataset_cfg = DatasetConfig {
        n,
        frame_count: frames,
        seed,
        contexts: contexts.clone(),
        trajectory: config.dataset.trajectory,
    };

    use rayon::prelude::*;
    let samples: Vec<Sample> = (0..n as u64)
        .into_par_iter()
        .map(|i| build_sample(&rasters, &spec, &profiles, &dataset_cfg, i).map_err(CliError::from))
        .collect::<Result<Vec<_>>>()?;
    for sample in &samples {
        formats::write_sample(&args.out, sample)?;
    }

    let index = formats::DatasetIndex {
        version: formats::DATASET_VERSION.to_string(),
        spec,
        seed,
        n,
        frame_count: frames,
        contexts,
        maps: paths
            .iter()
            .zip(&rasters)
            .map(|(p, r)| formats::MapRef {
                file: p.file_name().unwrap().to_string_lossy().into_owned(),
                hash: r.content_hash(),
            })
            .collect(),
        profiles,
    };
    formats::write_dataset_index(&args.out, &index)?;
    println!(
        "{}",
        serde_json::json!({
            "samples": n,
            "frames": frames,
            "out": args.out,
            "train": samples.iter().filter(|s| s.split == Split::Train).count(),
            "val": samples.iter().filter(|s| s.split == Split::Val).count(),
        })
    );
    Ok(())
}

fn load_dataset_samples(dataset_dir: &Path, index: &formats::DatasetIndex) -> Result<Vec<Sample>> {
    (0..index.n as u64)
        .map(|id| formats::read_sample(dataset_dir, id, index.spec.resolution))
        .collect()
}

fn cmd_train(args: TrainArgs, config: &RunConfig) -> Result<()> {
    let index = formats::read_dataset_index(&args.dataset)?;
    let (paths, rasters, spec) = load_maps(&args.maps, Some(&index))?;
    let samples = load_dataset_samples(&args.dataset, &index)?;

    let section = &config.train;
    let train_cfg = TrainConfig {
        epochs: args.epochs.unwrap_or(section.epochs),
        batch_size: args.batch.unwrap_or(section.batch),
        learning_rate: args.lr.unwrap_or(section.lr),
        loss: LossConfig {
            lambda: args.lambda.unwrap_or(section.lambda),
            sigma_d: args.sigma_d.unwrap_or(section.sigma_d),
        },
        seed: args.seed.unwrap_or(section.seed),
        eval_rotations: section.eval_rotations,
        descriptor: section.descriptor,
        ..TrainConfig::default()
    };

    let desc = train_cfg.descriptor;
    let bases: Vec<_> = paths
        .iter()
        .zip(&rasters)
        .map(|(p, r)| formats::cached_base_grid(p, r, &spec, &desc))
        .collect::<Result<Vec<_>>>()?;

    let train_set = train_samples(&samples, Split::Train);
    let val_set = train_samples(&samples, Split::Val);
    let outcome = crate::experiment::with_workers(0, || {
        train_with_encoder(
            &crate::experiment::RayonEncoder,
            &train_set,
            &val_set,
            &bases,
            &train_cfg,
            &spec,
        )
    })?
    .map_err(CliError::from)?;

    let header = formats::ParamsHeader {
        dim: outcome.params.dim,
        heads: outcome.params.heads,
        query_rows: outcome.params.query_rows,
        query_cols: outcome.params.query_cols,
        grid_dim: outcome.params.grid_dim,
        descriptor: desc,
        spec,
        train: train_cfg,
    };
    formats::write_params(&args.out, &outcome.params, &header)?;
    formats::write_learning_curve(&args.out.with_extension("csv"), &outcome.curve)?;

    let last = outcome.curve.last();
    println!(
        "{}",
        serde_json::json!({
            "params": args.out,
            "epochs": train_cfg.epochs,
            "best_epoch": outcome.best_epoch,
            "train_samples": train_set.len(),
            "val_samples": val_set.len(),
            "final_train_loss": last.map(|r| r.train_loss),
            "best_val_top3": outcome.curve.iter().map(|r| r.val_top3).fold(0.0, f64::max),
        })
    );
    Ok(())
}

fn cmd_localize(args: LocalizeArgs, config: &RunConfig) -> Result<()> {
    let (params, header) = formats::read_params(&args.params)?;
    let (map, _sidecar) = formats::read_map(&args.map)?;
    let sample = formats::read_sample_at(&args.sample, header.spec.resolution)?;
    let seed = args.seed.unwrap_or(config.eval.seed);
    let rotations = args.rotations.unwrap_or(config.eval.rotations);

    let base = formats::cached_base_grid(&args.map, &map, &header.spec, &header.descriptor)?;
    let fused = fuse_frames(&sample.frames);
    let coarse = infer_cell(&fused.raster, &base, &params, &header.descriptor, rotations)
        .map_err(CliError::from)?;
    let fine = localize_or_fallback(
        &fused,
        &map,
        &coarse,
        &header.spec,
        &config.ransac,
        seed ^ sample.id,
    );

    println!(
        "{}",
        serde_json::json!({
            "sample": sample.id,
            "est_pose": { "x": fine.pose.x, "y": fine.pose.y, "theta": fine.pose.theta },
            "truth_pose": {
                "x": sample.truth_pose.x,
                "y": sample.truth_pose.y,
                "theta": sample.truth_pose.theta,
            },
            "coarse_cell": { "row": coarse.row, "col": coarse.col },
            "matches": fine.diagnostics.matches,
            "inliers": fine.diagnostics.inliers,
            "rms_px": if fine.diagnostics.rms_px.is_finite() { fine.diagnostics.rms_px } else { -1.0 },
            "non_rigid": fine.diagnostics.non_rigid,
            "fallback": fine.diagnostics.fallback,
        })
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs, config: &RunConfig) -> Result<()> {
    let index = formats::read_dataset_index(&args.dataset)?;
    let (paths, rasters, spec) = load_maps(&args.maps, Some(&index))?;
    let (params, header) = formats::read_params(&args.params)?;
    if header.spec != spec {
        return Err(CliError::data(
            "parameter file was trained for a different map spec".to_string(),
        ));
    }
    let samples = load_dataset_samples(&args.dataset, &index)?;

    let thresholds = match &args.thresholds {
        Some(text) => text
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| CliError::usage(format!("bad threshold '{t}'")))
            })
            .collect::<Result<Vec<_>>>()?,
        None => config.eval.thresholds.clone(),
    };
    let settings = EvalSettings {
        thresholds,
        rotations: args.rotations.unwrap_or(config.eval.rotations),
        ransac: config.ransac,
        seed: args.seed.unwrap_or(config.eval.seed),
    };

    let bases: Vec<_> = paths
        .iter()
        .zip(&rasters)
        .map(|(p, r)| formats::cached_base_grid(p, r, &spec, &header.descriptor))
        .collect::<Result<Vec<_>>>()?;

    let mut records =
        evaluate_samples(&samples, &rasters, &bases, &params, &header.descriptor, &spec, &settings)?;
    let report = build_report(&mut records, &settings)?;

    std::fs::create_dir_all(&args.out)?;
    crate::experiment::write_report_json(&args.out.join("report.json"), &report)?;
    formats::write_records_csv(&args.out.join("records.csv"), &records)?;
    formats::write_text(
        &args.out.join("error_histogram.svg"),
        &plots::error_histogram_svg(&report.metrics),
    )?;
    formats::write_text(
        &args.out.join("error_vs_displacement.svg"),
        &plots::error_vs_displacement_svg(&records, 25.0),
    )?;
    formats::write_text(
        &args.out.join("context_bars.svg"),
        &plots::context_bars_svg(&report.metrics),
    )?;

    println!(
        "{}",
        serde_json::json!({
            "samples": report.samples,
            "top_1x1": report.metrics.overall.top_1x1,
            "top_3x3": report.metrics.overall.top_3x3,
            "recall@1m": report.metrics.overall.recall.get("1.0"),
            "median_error": report.metrics.overall.median_error,
            "fallback_rate": report.metrics.overall.fallback_rate,
            "out": args.out,
        })
    );
    Ok(())
}
