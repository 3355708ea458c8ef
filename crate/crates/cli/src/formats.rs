//! On-disk formats: paletted map/observation images with JSON sidecars,
//! the binary base-grid cache ("BMMG"), the binary parameter file ("BMMP"),
//! dataset directories, and the CSV/JSON reports.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use semloc_core::dataset::{ContextProfiles, Sample, Split};
use semloc_core::descriptor::{BaseGrid, DescriptorConfig};
use semloc_core::geom::{GridIndex, MapSpec, Pose2};
use semloc_core::metrics::EvalRecord;
use semloc_core::raster::{CLASS_PALETTE, NUM_CLASSES};
use semloc_core::retrieval::{EpochStats, RetrievalParams, TrainConfig};
use semloc_core::sensorsim::{ContextName, Observation};
use semloc_core::temporal::FrameSequence;
use semloc_core::worldgen::WorldGenConfig;
use semloc_core::SemanticRaster;

use crate::error::{CliError, Result};

pub const MAP_SIDECAR_VERSION: &str = "bmm-map/1";
pub const DATASET_VERSION: &str = "bmm-dataset/1";
pub const REPORT_SCHEMA: &str = "bmm-report/1";
const GRID_CACHE_MAGIC: &[u8; 4] = b"BMMG";
const PARAMS_MAGIC: &[u8; 4] = b"BMMP";
const PARAMS_VERSION: u32 = 1;

/// Write a class raster as an indexed-color PNG with the project palette.
pub fn write_raster_png(path: &Path, raster: &SemanticRaster) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), raster.width as u32, raster.height as u32);
    encoder.set_color(png::ColorType::Indexed);
    encoder.set_depth(png::BitDepth::Eight);
    let mut palette = Vec::with_capacity(NUM_CLASSES * 3);
    for rgb in CLASS_PALETTE {
        palette.extend_from_slice(&rgb);
    }
    encoder.set_palette(palette);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(&raster.classes)?;
    Ok(())
}

/// Read an indexed-color PNG back into a class raster.
pub fn read_raster_png(path: &Path, resolution: f64) -> Result<SemanticRaster> {
    let file = fs::File::open(path)
        .map_err(|e| CliError::data(format!("cannot open {}: {e}", path.display())))?;
    let decoder = png::Decoder::new(file);
    let mut reader = decoder.read_info()?;
    let info = reader.info();
    if info.color_type != png::ColorType::Indexed {
        return Err(CliError::format_mismatch(
            format!("{} is not a class-indexed image", path.display()),
            "indexed-color PNG",
            format!("{:?}", info.color_type),
        ));
    }
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf)?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    buf.truncate(frame.buffer_size());
    if buf.iter().any(|&c| c as usize >= NUM_CLASSES) {
        return Err(CliError::data(format!(
            "{} holds class indices outside 0..{NUM_CLASSES}",
            path.display()
        )));
    }
    Ok(SemanticRaster::from_classes(w, h, resolution, buf))
}

/// JSON sidecar written next to every map image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapSidecar {
    pub version: String,
    pub seed: u64,
    pub spec: MapSpec,
    pub worldgen: WorldGenConfig,
    pub palette: Vec<[u8; 3]>,
}

pub fn write_map(dir: &Path, name: &str, raster: &SemanticRaster, sidecar: &MapSidecar) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_raster_png(&dir.join(format!("{name}.png")), raster)?;
    let json = serde_json::to_string_pretty(sidecar)?;
    fs::write(dir.join(format!("{name}.json")), json)?;
    Ok(())
}

pub fn read_map(png_path: &Path) -> Result<(SemanticRaster, MapSidecar)> {
    let sidecar_path = png_path.with_extension("json");
    let text = fs::read_to_string(&sidecar_path)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", sidecar_path.display())))?;
    let sidecar: MapSidecar = serde_json::from_str(&text)?;
    if sidecar.version != MAP_SIDECAR_VERSION {
        return Err(CliError::format_mismatch(
            format!("{} has an unsupported version", sidecar_path.display()),
            MAP_SIDECAR_VERSION,
            sidecar.version,
        ));
    }
    let raster = read_raster_png(png_path, sidecar.spec.resolution)?;
    Ok((raster, sidecar))
}

/// Every map image (with a sidecar) in a directory, sorted by file name.
pub fn list_maps(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut maps = Vec::new();
    let entries = fs::read_dir(dir)
        .map_err(|e| CliError::data(format!("cannot list {}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "png") && path.with_extension("json").exists() {
            maps.push(path);
        }
    }
    maps.sort();
    if maps.is_empty() {
        return Err(CliError::data(format!("no map images found in {}", dir.display())));
    }
    Ok(maps)
}

/// Binary base-grid cache: magic "BMMG", little-endian header
/// {G: u32, D: u32, proj_seed: u64, map_hash: u64}, then G*G*D f32 values
/// row-major.
pub fn write_grid_cache(path: &Path, grid: &BaseGrid, proj_seed: u64, map_hash: u64) -> Result<()> {
    let mut out = Vec::with_capacity(24 + grid.data.len() * 4);
    out.extend_from_slice(GRID_CACHE_MAGIC);
    out.extend_from_slice(&(grid.grid_dim as u32).to_le_bytes());
    out.extend_from_slice(&(grid.dim as u32).to_le_bytes());
    out.extend_from_slice(&proj_seed.to_le_bytes());
    out.extend_from_slice(&map_hash.to_le_bytes());
    for &v in &grid.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_grid_cache(path: &Path) -> Result<(BaseGrid, u64, u64)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 24 || &bytes[..4] != GRID_CACHE_MAGIC {
        return Err(CliError::format_mismatch(
            format!("{} is not a base-grid cache", path.display()),
            "BMMG",
            String::from_utf8_lossy(bytes.get(..4).unwrap_or(b"????")).into_owned(),
        ));
    }
    let g = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let proj_seed = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let map_hash = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
    let expect = 28 + g * g * d * 4;
    if bytes.len() != expect {
        return Err(CliError::format_mismatch(
            format!("{} is truncated", path.display()),
            format!("{expect} bytes"),
            format!("{} bytes", bytes.len()),
        ));
    }
    let mut data = Vec::with_capacity(g * g * d);
    for chunk in bytes[28..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Ok((BaseGrid { grid_dim: g, dim: d, data }, proj_seed, map_hash))
}

/// Pooled base grid for a map, going through the cache file beside the
/// map image when it matches the map hash and projection seed.
pub fn cached_base_grid(
    map_png: &Path,
    map: &SemanticRaster,
    spec: &MapSpec,
    desc: &DescriptorConfig,
) -> Result<BaseGrid> {
    let hash = map.content_hash();
    let cache_path = map_png.with_extension("bmmg");
    if cache_path.exists() {
        if let Ok((grid, seed, cached_hash)) = read_grid_cache(&cache_path) {
            if seed == desc.proj_seed && cached_hash == hash && grid.dim == desc.dim {
                return Ok(grid);
            }
        }
    }
    let tokens = semloc_core::descriptor::tokenize(map, desc)?;
    let mut grid = semloc_core::descriptor::pool_base_grid(&tokens, spec)?;
    // The cache stores f32; quantize the freshly computed grid the same
    // way so a run that writes the cache and a run that reads it train on
    // identical values.
    for v in grid.data.iter_mut() {
        *v = *v as f32 as f64;
    }
    write_grid_cache(&cache_path, &grid, desc.proj_seed, hash)?;
    Ok(grid)
}

/// Hyperparameter blob stored inside the parameter file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamsHeader {
    pub dim: usize,
    pub heads: usize,
    pub query_rows: usize,
    pub query_cols: usize,
    pub grid_dim: usize,
    pub descriptor: DescriptorConfig,
    pub spec: MapSpec,
    pub train: TrainConfig,
}

/// Binary parameter file: magic "BMMP", version u32, hyperparameter JSON
/// blob (u32 length + bytes), then all tensors in declared order as
/// little-endian f32: query_pos, base_pos, w_query, w_key, w_value,
/// w_output, head_weight, head_bias.
pub fn write_params(path: &Path, params: &RetrievalParams, header: &ParamsHeader) -> Result<()> {
    let blob = serde_json::to_vec(header)?;
    let mut out = Vec::new();
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    out.extend_from_slice(&blob);
    for tensor in params.tensors().iter().copied().chain([params.head_bias.as_slice()]) {
        for &v in tensor {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<(RetrievalParams, ParamsHeader)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| CliError::data(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != PARAMS_MAGIC {
        return Err(CliError::format_mismatch(
            format!("{} is not a parameter file", path.display()),
            "BMMP",
            String::from_utf8_lossy(bytes.get(..4).unwrap_or(b"????")).into_owned(),
        ));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != PARAMS_VERSION {
        return Err(CliError::format_mismatch(
            format!("{} has an unsupported version", path.display()),
            PARAMS_VERSION.to_string(),
            version.to_string(),
        ));
    }
    let blob_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header: ParamsHeader = serde_json::from_slice(
        bytes
            .get(12..12 + blob_len)
            .ok_or_else(|| CliError::data(format!("{} is truncated", path.display())))?,
    )?;

    let mut params = RetrievalParams::init(
        header.dim,
        header.heads,
        header.query_rows,
        header.query_cols,
        header.grid_dim,
        0,
    )
    .map_err(CliError::from)?;
    let mut offset = 12 + blob_len;
    let mut fill = |buf: &mut Vec<f64>| -> Result<()> {
        let need = buf.len() * 4;
        let slice = bytes
            .get(offset..offset + need)
            .ok_or_else(|| CliError::data(format!("{} is truncated", path.display())))?;
        for (dst, chunk) in buf.iter_mut().zip(slice.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
        offset += need;
        Ok(())
    };
    fill(&mut params.query_pos)?;
    fill(&mut params.base_pos)?;
    fill(&mut params.w_query)?;
    fill(&mut params.w_key)?;
    fill(&mut params.w_value)?;
    fill(&mut params.w_output)?;
    fill(&mut params.head_weight)?;
    fill(&mut params.head_bias)?;
    if offset != bytes.len() {
        return Err(CliError::format_mismatch(
            format!("{} has trailing bytes", path.display()),
            format!("{offset} bytes"),
            format!("{} bytes", bytes.len()),
        ));
    }
    Ok((params, header))
}

/// Learning curve CSV: epoch,train_loss,val_top1,val_top3.
pub fn write_learning_curve(path: &Path, curve: &[EpochStats]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_top1,val_top3\n");
    for row in curve {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            row.epoch, row.train_loss, row.val_top1, row.val_top3
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Dataset index json.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub version: String,
    pub spec: MapSpec,
    pub seed: u64,
    pub n: usize,
    pub frame_count: usize,
    pub contexts: Vec<(ContextName, f64)>,
    /// Map file names (relative to the maps directory) with content
    /// hashes, indexed by `map_id`.
    pub maps: Vec<MapRef>,
    pub profiles: ContextProfiles,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapRef {
    pub file: String,
    pub hash: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FrameMeta {
    context: ContextName,
    truth_pose: Pose2,
    truncated: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OdometryFile {
    rel: Vec<Pose2>,
    dt: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SampleMeta {
    id: u64,
    map_id: usize,
    context: ContextName,
    truth_pose: Pose2,
    truth_cell: GridIndex,
    split: Split,
}

pub fn sample_dir(dataset_dir: &Path, id: u64) -> PathBuf {
    dataset_dir.join("samples").join(format!("sample_{id:06}"))
}

/// Persist one sample as a directory of frame images plus odometry and
/// metadata JSON.
pub fn write_sample(dataset_dir: &Path, sample: &Sample) -> Result<()> {
    let dir = sample_dir(dataset_dir, sample.id);
    fs::create_dir_all(&dir)?;
    for (k, frame) in sample.frames.frames.iter().enumerate() {
        write_raster_png(&dir.join(format!("frame_{k:02}.png")), &frame.raster)?;
        let meta = FrameMeta {
            context: frame.context,
            truth_pose: frame.truth_pose,
            truncated: frame.truncated,
        };
        fs::write(dir.join(format!("frame_{k:02}.json")), serde_json::to_string_pretty(&meta)?)?;
    }
    let odo = OdometryFile { rel: sample.frames.rel_odometry.clone(), dt: sample.frames.dt };
    fs::write(dir.join("odometry.json"), serde_json::to_string_pretty(&odo)?)?;
    let meta = SampleMeta {
        id: sample.id,
        map_id: sample.map_id,
        context: sample.context,
        truth_pose: sample.truth_pose,
        truth_cell: sample.truth_cell,
        split: sample.split,
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Load one sample directory (written by [`write_sample`]).
pub fn read_sample(dataset_dir: &Path, id: u64, resolution: f64) -> Result<Sample> {
    let dir = sample_dir(dataset_dir, id);
    read_sample_at(&dir, resolution)
}

/// Load a sample from an explicit directory path.
pub fn read_sample_at(dir: &Path, resolution: f64) -> Result<Sample> {
    let meta: SampleMeta = serde_json::from_str(
        &fs::read_to_string(dir.join("meta.json"))
            .map_err(|e| CliError::data(format!("cannot read {}/meta.json: {e}", dir.display())))?,
    )?;
    let odo: OdometryFile = serde_json::from_str(&fs::read_to_string(dir.join("odometry.json"))?)?;
    let mut frames = Vec::new();
    for k in 0.. {
        let png = dir.join(format!("frame_{k:02}.png"));
        if !png.exists() {
            break;
        }
        let raster = read_raster_png(&png, resolution)?;
        let fm: FrameMeta =
            serde_json::from_str(&fs::read_to_string(dir.join(format!("frame_{k:02}.json")))?)?;
        frames.push(Observation {
            raster,
            context: fm.context,
            truth_pose: fm.truth_pose,
            truncated: fm.truncated,
        });
    }
    let frames = FrameSequence::new(frames, odo.rel, odo.dt).map_err(CliError::from)?;
    Ok(Sample {
        id: meta.id,
        map_id: meta.map_id,
        context: meta.context,
        frames,
        truth_pose: meta.truth_pose,
        truth_cell: meta.truth_cell,
        split: meta.split,
    })
}

pub fn write_dataset_index(dataset_dir: &Path, index: &DatasetIndex) -> Result<()> {
    fs::create_dir_all(dataset_dir)?;
    fs::write(dataset_dir.join("dataset.json"), serde_json::to_string_pretty(index)?)?;
    Ok(())
}

pub fn read_dataset_index(dataset_dir: &Path) -> Result<DatasetIndex> {
    let path = dataset_dir.join("dataset.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    let index: DatasetIndex = serde_json::from_str(&text)?;
    if index.version != DATASET_VERSION {
        return Err(CliError::format_mismatch(
            format!("{} has an unsupported version", path.display()),
            DATASET_VERSION,
            index.version,
        ));
    }
    Ok(index)
}

/// Per-sample evaluation records as CSV with a fixed column set.
pub fn write_records_csv(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut out = String::from(
        "sample_id,context,coarse_row,coarse_col,truth_row,truth_col,\
         coarse_hit_1x1,coarse_hit_3x3,est_x,est_y,est_theta,truth_x,truth_y,truth_theta,\
         position_error_m,displacement_m,inliers,rms_px,fallback\n",
    );
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{:.6},{}\n",
            r.sample_id,
            r.context.as_str(),
            r.coarse_cell.row,
            r.coarse_cell.col,
            r.truth_cell.row,
            r.truth_cell.col,
            r.coarse_hit_1x1,
            r.coarse_hit_3x3,
            r.est_pose.x,
            r.est_pose.y,
            r.est_pose.theta,
            r.truth_pose.x,
            r.truth_pose.y,
            r.truth_pose.theta,
            r.position_error,
            r.displacement,
            r.inliers,
            if r.rms_px.is_finite() { r.rms_px } else { -1.0 },
            r.fallback
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Atomic-ish write used for outputs that determinism tests byte-compare.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
