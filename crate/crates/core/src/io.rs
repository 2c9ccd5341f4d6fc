//! File formats: PBM mirror patterns, 16-bit PGM fields with JSON sidecars,
//! CSV traces and JSON transport plans.
//!
//! Every writer returns the paths it created so callers can build a
//! manifest.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageFormat};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::{joules_to_microkelvin, MICRO};
use crate::dynamics::{Snapshot, TrajectoryRecord};
use crate::imaging::FluorescenceImage;
use crate::optics::{IntensityField2D, IntensityField3D};
use crate::patterns::{DeviceGeometry, MirrorPattern, ShapeSpec, TargetIntensityMap};
use crate::potential::PotentialField2D;
use crate::transport::{ParallelPlan, TransportPlan};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec: {0}")]
    Codec(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid data: {0}")]
    Invalid(String),
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.to_path_buf(),
        source,
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(file_err(dir))?;
    }
    fs::write(path, bytes).map_err(file_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

/// Path of the JSON sidecar belonging to an image file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Binary PBM with mirror "on" stored as white.
pub fn encode_pbm(pattern: &MirrorPattern) -> Result<Vec<u8>, IoError> {
    let (rows, cols) = pattern.dim();
    let samples: Vec<u8> = pattern.cells().iter().map(|&on| on as u8).collect();
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Bitmap(SampleEncoding::Binary))
        .encode(&samples[..], cols as u32, rows as u32, ExtendedColorType::L1)
        .map_err(|e| IoError::Codec(e.to_string()))?;
    Ok(out)
}

pub fn decode_pbm(bytes: &[u8], geometry: DeviceGeometry) -> Result<MirrorPattern, IoError> {
    let img = image::load(Cursor::new(bytes), ImageFormat::Pnm)
        .map_err(|e| IoError::Codec(e.to_string()))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let cells = Array2::from_shape_fn((h as usize, w as usize), |(r, c)| img.get_pixel(c as u32, r as u32)[0] > 127);
    MirrorPattern::from_cells(geometry, cells).map_err(|e| IoError::Invalid(e.to_string()))
}

pub fn write_pbm(pattern: &MirrorPattern, path: &Path) -> Result<Vec<PathBuf>, IoError> {
    write_bytes(path, &encode_pbm(pattern)?)?;
    Ok(vec![path.to_path_buf()])
}

pub fn read_pbm(path: &Path, geometry: DeviceGeometry) -> Result<MirrorPattern, IoError> {
    decode_pbm(&fs::read(path).map_err(file_err(path))?, geometry)
}

/// Binary 16-bit PGM (maxval 65535, big-endian samples), row 0 first.
pub fn encode_pgm16(data: &Array2<u16>) -> Vec<u8> {
    let (rows, cols) = data.dim();
    let mut out = format!("P5\n{cols} {rows}\n65535\n").into_bytes();
    out.reserve(2 * rows * cols);
    for v in data.iter() {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn decode_pgm16(bytes: &[u8]) -> Result<Array2<u16>, IoError> {
    let img = image::load(Cursor::new(bytes), ImageFormat::Pnm)
        .map_err(|e| IoError::Codec(e.to_string()))?
        .into_luma16();
    let (w, h) = img.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), img.into_raw()).map_err(|e| IoError::Invalid(e.to_string()))
}

/// Values in `[0, 1]` scaled to the full 16-bit range.
pub fn quantize_unit(data: &Array2<f64>) -> Array2<u16> {
    data.mapv(|v| (v.clamp(0.0, 1.0) * u16::MAX as f64).round() as u16)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMapSidecar {
    pub rows: usize,
    pub cols: usize,
    pub mirror_pitch_um: f64,
    pub demagnification: f64,
    pub image_pitch_um: f64,
    pub full_scale: u16,
    pub shape: Option<ShapeSpec>,
}

/// Writes `map` as a 16-bit PGM plus JSON sidecar with the device geometry.
pub fn write_target_map(map: &TargetIntensityMap, path: &Path) -> Result<Vec<PathBuf>, IoError> {
    let g = map.geometry();
    write_bytes(path, &encode_pgm16(&quantize_unit(map.grid())))?;
    let side = sidecar_path(path);
    write_json(
        &side,
        &TargetMapSidecar {
            rows: g.rows,
            cols: g.cols,
            mirror_pitch_um: g.pitch / MICRO,
            demagnification: g.demagnification,
            image_pitch_um: g.image_pitch() / MICRO,
            full_scale: u16::MAX,
            shape: map.annotation().cloned(),
        },
    )?;
    Ok(vec![path.to_path_buf(), side])
}

/// Reads a map written by [`write_target_map`]; values are quantized to
/// 1/65535.
pub fn read_target_map(path: &Path) -> Result<TargetIntensityMap, IoError> {
    let side = sidecar_path(path);
    let meta: TargetMapSidecar =
        serde_json::from_slice(&fs::read(&side).map_err(file_err(&side))?)?;
    let raw = decode_pgm16(&fs::read(path).map_err(file_err(path))?)?;
    let geometry = DeviceGeometry {
        rows: meta.rows,
        cols: meta.cols,
        pitch: meta.mirror_pitch_um * MICRO,
        demagnification: meta.demagnification,
    };
    let grid = raw.mapv(|v| v as f64 / meta.full_scale as f64);
    TargetIntensityMap::from_grid(geometry, grid, meta.shape).map_err(|e| IoError::Invalid(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSidecar {
    pub rows: usize,
    pub cols: usize,
    pub spacing_um: f64,
    /// Position of pixel `[0, 0]`, µm.
    pub origin_um: [f64; 2],
    /// Physical value represented by full scale.
    pub full_scale_value: f64,
    pub unit: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_um: Option<f64>,
}

fn normalized(data: &Array2<f64>) -> (Array2<u16>, f64) {
    let max = data.iter().copied().fold(0.0, f64::max);
    let scaled = if max > 0.0 { data.mapv(|v| v / max) } else { data.clone() };
    (quantize_unit(&scaled), max)
}

/// Writes an intensity field normalized to its maximum, with the maximum
/// (W/m²) recorded in the sidecar.
pub fn write_intensity_field(field: &IntensityField2D, path: &Path) -> Result<Vec<PathBuf>, IoError> {
    write_field(&field.data, field.spacing, field.origin, None, path)
}

fn write_field(data: &Array2<f64>, spacing: f64, origin: [f64; 2], z: Option<f64>, path: &Path) -> Result<Vec<PathBuf>, IoError> {
    let (q, max) = normalized(data);
    write_bytes(path, &encode_pgm16(&q))?;
    let side = sidecar_path(path);
    let (rows, cols) = data.dim();
    write_json(
        &side,
        &FieldSidecar {
            rows,
            cols,
            spacing_um: spacing / MICRO,
            origin_um: [origin[0] / MICRO, origin[1] / MICRO],
            full_scale_value: max,
            unit: "W/m^2".into(),
            z_um: z.map(|z| z / MICRO),
        },
    )?;
    Ok(vec![path.to_path_buf(), side])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceIndex {
    pub wavelength_nm: f64,
    pub spacing_um: f64,
    pub origin_um: [f64; 2],
    pub slices: Vec<SliceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceEntry {
    pub z_um: f64,
    pub file: String,
}

/// Writes every z slice as `<stem>_zNNNN.pgm` (each with a sidecar) and an
/// index `<stem>_index.json` in `dir`.
pub fn write_intensity_field_3d(field: &IntensityField3D, dir: &Path, stem: &str) -> Result<Vec<PathBuf>, IoError> {
    let mut written = Vec::new();
    let mut slices = Vec::with_capacity(field.z.len());
    for (k, &z) in field.z.iter().enumerate() {
        let name = format!("{stem}_z{k:04}.pgm");
        let slice = field.data.index_axis(ndarray::Axis(0), k).to_owned();
        written.extend(write_field(&slice, field.spacing, field.origin, Some(z), &dir.join(&name))?);
        slices.push(SliceEntry { z_um: z / MICRO, file: name });
    }
    let index = dir.join(format!("{stem}_index.json"));
    write_json(
        &index,
        &SliceIndex {
            wavelength_nm: field.wavelength * 1e9,
            spacing_um: field.spacing / MICRO,
            origin_um: [field.origin[0] / MICRO, field.origin[1] / MICRO],
            slices,
        },
    )?;
    written.push(index);
    Ok(written)
}

/// Potential grid as CSV rows `x_um, y_um, U_uK`.
pub fn write_potential_csv(field: &PotentialField2D, path: &Path) -> Result<Vec<PathBuf>, IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["x_um", "y_um", "U_uK"])?;
    for ((r, c), &u) in field.data.indexed_iter() {
        let x = field.origin[0] + c as f64 * field.spacing;
        let y = field.origin[1] + r as f64 * field.spacing;
        w.serialize((x / MICRO, y / MICRO, joules_to_microkelvin(u)))?;
    }
    finish_csv(w, path)
}

fn finish_csv(w: csv::Writer<Vec<u8>>, path: &Path) -> Result<Vec<PathBuf>, IoError> {
    let bytes = w.into_inner().map_err(|e| IoError::Invalid(e.to_string()))?;
    write_bytes(path, &bytes)?;
    Ok(vec![path.to_path_buf()])
}

/// Trajectory trace as CSV; positions in µm, time in µs, T in µK.
pub fn write_trajectory_csv(record: &TrajectoryRecord, path: &Path) -> Result<Vec<PathBuf>, IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["time_us", "com_x_um", "com_y_um", "com_z_um", "T_uK", "N_alive"])?;
    for i in 0..record.times.len() {
        let c = record.center_of_mass[i];
        w.serialize((
            record.times[i] / MICRO,
            c.x / MICRO,
            c.y / MICRO,
            c.z / MICRO,
            record.temperature[i] / MICRO,
            record.n_alive[i],
        ))?;
    }
    finish_csv(w, path)
}

/// Phase-space dump of one snapshot; positions in µm, velocities in mm/s.
pub fn write_snapshot_csv(snapshot: &Snapshot, path: &Path) -> Result<Vec<PathBuf>, IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["atom", "x_um", "y_um", "z_um", "vx_mm_s", "vy_mm_s", "vz_mm_s", "alive"])?;
    for (i, (p, v)) in snapshot.positions.iter().zip(&snapshot.velocities).enumerate() {
        w.serialize((
            i,
            p.x / MICRO,
            p.y / MICRO,
            p.z / MICRO,
            v.x * 1e3,
            v.y * 1e3,
            v.z * 1e3,
            snapshot.alive[i] as u8,
        ))?;
    }
    finish_csv(w, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSidecar {
    pub rows: usize,
    pub cols: usize,
    pub pixel_size_um: f64,
    pub origin_um: [f64; 2],
    pub exposure_us: f64,
    pub seed: u64,
    pub total_counts: u64,
    pub saturated_pixels: usize,
}

/// Photon counts as a 16-bit PGM; counts above 65535 saturate and are
/// tallied in the sidecar.
pub fn write_fluorescence_image(image: &FluorescenceImage, path: &Path) -> Result<Vec<PathBuf>, IoError> {
    let saturated = image.counts.iter().filter(|&&c| c > u16::MAX as u32).count();
    let q = image.counts.mapv(|c| c.min(u16::MAX as u32) as u16);
    write_bytes(path, &encode_pgm16(&q))?;
    let (rows, cols) = image.counts.dim();
    let side = sidecar_path(path);
    write_json(
        &side,
        &ImageSidecar {
            rows,
            cols,
            pixel_size_um: image.pixel_size / MICRO,
            origin_um: [image.origin[0] / MICRO, image.origin[1] / MICRO],
            exposure_us: image.exposure / MICRO,
            seed: image.seed,
            total_counts: image.total(),
            saturated_pixels: saturated,
        },
    )?;
    Ok(vec![path.to_path_buf(), side])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub start_um: [f64; 2],
    pub end_um: [f64; 2],
    pub distance_um: f64,
    #[serde(rename = "depth_uK")]
    pub depth_uk: f64,
    pub trap_waist_um: f64,
    pub channel_half_length_um: f64,
    pub channel_half_width_um: f64,
    pub channel_angle_rad: f64,
    pub frame_rate_hz: f64,
    pub half_period_us: f64,
    pub release_frame: usize,
    pub recapture_frame: usize,
    pub total_frames: usize,
    pub release_time_us: f64,
    pub recapture_time_us: f64,
    pub residual_us: f64,
    pub warning: Option<String>,
}

impl From<&TransportPlan> for PlanRecord {
    fn from(p: &TransportPlan) -> Self {
        let r = &p.request;
        let um = |v: [f64; 2]| [v[0] / MICRO, v[1] / MICRO];
        Self {
            start_um: um(r.start),
            end_um: um(r.end),
            distance_um: p.distance() / MICRO,
            depth_uk: joules_to_microkelvin(r.depth),
            trap_waist_um: r.trap_waist / MICRO,
            channel_half_length_um: r.channel_half_length / MICRO,
            channel_half_width_um: r.channel_half_width / MICRO,
            channel_angle_rad: p.channel.angle,
            frame_rate_hz: r.frame_rate,
            half_period_us: p.half_period / MICRO,
            release_frame: p.release_frame,
            recapture_frame: p.recapture_frame,
            total_frames: p.total_frames,
            release_time_us: p.release_time() / MICRO,
            recapture_time_us: p.recapture_time() / MICRO,
            residual_us: p.residual / MICRO,
            warning: p.warning.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelPlanRecord {
    pub frame_rate_hz: f64,
    pub release_frame: usize,
    pub total_frames: usize,
    pub plans: Vec<PlanRecord>,
    /// Frame files, one per frame, relative to the plan file.
    pub frame_files: Vec<String>,
}

/// Writes the plan JSON. `frame_files` names the already-written frame
/// bitmaps.
pub fn write_plan_json(plan: &ParallelPlan, frame_files: Vec<String>, path: &Path) -> Result<Vec<PathBuf>, IoError> {
    write_json(
        path,
        &ParallelPlanRecord {
            frame_rate_hz: plan.frame_rate,
            release_frame: plan.release_frame,
            total_frames: plan.total_frames,
            plans: plan.plans.iter().map(PlanRecord::from).collect(),
            frame_files,
        },
    )?;
    Ok(vec![path.to_path_buf()])
}

/// Writes a serializable value as pretty JSON with a trailing newline.
pub fn write_json_file<T: Serialize>(value: &T, path: &Path) -> Result<Vec<PathBuf>, IoError> {
    write_json(path, value)?;
    Ok(vec![path.to_path_buf()])
}
