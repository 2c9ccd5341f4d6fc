//! Binary micromirror patterns, target intensity maps and dithering.
//!
//! Coordinates: image-plane positions are measured from the image of the
//! device centre, with `x` running along mirror columns and `y` along mirror
//! rows. A mirror at `(row, col)` images to
//! `((col + ½ − cols/2)·p, (row + ½ − rows/2)·p)` where `p` is the
//! demagnified mirror pitch.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::MICRO;

pub const MIN_FRAME_RATE_HZ: f64 = 4_000.0;
pub const MAX_FRAME_RATE_HZ: f64 = 20_000.0;

/// Number of intensity levels reproducible by a 4×4 block of binary mirrors.
pub const DITHER_LEVELS: usize = 16;

/// 4×4 Bayer index matrix. A block quantized to `n` levels switches on the
/// `n` cells with index below `n`.
pub const BAYER_4X4: [[u8; 4]; 4] = [[0, 8, 2, 10], [12, 4, 14, 6], [3, 11, 1, 9], [15, 7, 13, 5]];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PatternError {
    #[error("shape extends outside the device footprint ({axis}: {extent_um:.3} µm > {limit_um:.3} µm)")]
    OutOfBounds {
        axis: &'static str,
        extent_um: f64,
        limit_um: f64,
    },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("frame rate {0} Hz outside device range [4 kHz, 20 kHz]")]
    FrameRate(f64),
    #[error("intensity value {0} outside [0, 1]")]
    ValueOutOfRange(f64),
    #[error("nothing to compose")]
    EmptyComposition,
}

/// Physical layout of the micromirror device and its imaging ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceGeometry {
    pub rows: usize,
    pub cols: usize,
    /// Mirror pitch on the device, m.
    pub pitch: f64,
    /// Object-to-image size ratio of the microscope.
    pub demagnification: f64,
}

impl Default for DeviceGeometry {
    fn default() -> Self {
        Self {
            rows: 768,
            cols: 1024,
            pitch: 13.7 * MICRO,
            demagnification: 57.0,
        }
    }
}

impl DeviceGeometry {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            ..Self::default()
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Mirror pitch as seen in the image plane, m.
    pub fn image_pitch(&self) -> f64 {
        self.pitch / self.demagnification
    }

    /// Image-plane position of a mirror centre, m.
    pub fn mirror_center(&self, row: usize, col: usize) -> (f64, f64) {
        let p = self.image_pitch();
        (
            (col as f64 + 0.5 - self.cols as f64 / 2.0) * p,
            (row as f64 + 0.5 - self.rows as f64 / 2.0) * p,
        )
    }

    /// Half extents `(x, y)` of the imaged device, m.
    pub fn half_extent(&self) -> (f64, f64) {
        let p = self.image_pitch();
        (self.cols as f64 * p / 2.0, self.rows as f64 * p / 2.0)
    }

    /// Inclusive mirror index range whose centres may fall inside `[lo, hi]`
    /// along one axis.
    fn index_range(&self, lo: f64, hi: f64, n: usize) -> (usize, usize) {
        let p = self.image_pitch();
        let to_idx = |v: f64| v / p + n as f64 / 2.0 - 0.5;
        let a = to_idx(lo).floor().max(0.0) as usize;
        let b = (to_idx(hi).ceil().max(0.0) as usize).min(n.saturating_sub(1));
        (a, b)
    }
}

/// Binary state of every mirror on the device.
#[derive(Debug, Clone, PartialEq)]
pub struct MirrorPattern {
    geometry: DeviceGeometry,
    cells: Array2<bool>,
}

impl MirrorPattern {
    pub fn all_off(geometry: DeviceGeometry) -> Self {
        Self {
            cells: Array2::from_elem(geometry.dim(), false),
            geometry,
        }
    }

    pub fn all_on(geometry: DeviceGeometry) -> Self {
        Self {
            cells: Array2::from_elem(geometry.dim(), true),
            geometry,
        }
    }

    pub fn from_cells(geometry: DeviceGeometry, cells: Array2<bool>) -> Result<Self, PatternError> {
        if cells.dim() != geometry.dim() {
            return Err(PatternError::DimensionMismatch {
                expected: geometry.dim(),
                found: cells.dim(),
            });
        }
        Ok(Self { geometry, cells })
    }

    pub fn geometry(&self) -> &DeviceGeometry {
        &self.geometry
    }

    pub fn cells(&self) -> &Array2<bool> {
        &self.cells
    }

    pub fn dim(&self) -> (usize, usize) {
        self.cells.dim()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[[row, col]]
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.cells[[row, col]] = on;
    }

    pub fn count_on(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

/// Timed movie of mirror patterns.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    frames: Vec<Arc<MirrorPattern>>,
    frame_rate: f64,
}

impl FrameSequence {
    pub fn new(frames: Vec<Arc<MirrorPattern>>, frame_rate: f64) -> Result<Self, PatternError> {
        check_frame_rate(frame_rate)?;
        if let Some(first) = frames.first() {
            for f in &frames[1..] {
                if f.dim() != first.dim() {
                    return Err(PatternError::DimensionMismatch {
                        expected: first.dim(),
                        found: f.dim(),
                    });
                }
            }
        }
        Ok(Self { frames, frame_rate })
    }

    pub fn frames(&self) -> &[Arc<MirrorPattern>] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn frame_period(&self) -> f64 {
        1.0 / self.frame_rate
    }

    pub fn duration(&self) -> f64 {
        self.frames.len() as f64 / self.frame_rate
    }
}

pub fn check_frame_rate(rate: f64) -> Result<(), PatternError> {
    if !(MIN_FRAME_RATE_HZ..=MAX_FRAME_RATE_HZ).contains(&rate) {
        return Err(PatternError::FrameRate(rate));
    }
    Ok(())
}

/// Geometric description of a trap layout, in image-plane micrometres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeSpec {
    Disk {
        center_um: [f64; 2],
        radius_um: f64,
    },
    /// Ring between two radii. A bullseye is the union of an annulus and a
    /// central disk.
    Annulus {
        center_um: [f64; 2],
        inner_radius_um: f64,
        outer_radius_um: f64,
    },
    /// `count` equal disks evenly spaced from `start_um` to `end_um`.
    Line {
        start_um: [f64; 2],
        end_um: [f64; 2],
        count: usize,
        radius_um: f64,
    },
    /// Rectangular array of disks centred on `center_um`.
    Grid {
        center_um: [f64; 2],
        rows: usize,
        cols: usize,
        spacing_um: f64,
        radius_um: f64,
    },
    Star {
        center_um: [f64; 2],
        points: usize,
        outer_radius_um: f64,
        inner_radius_um: f64,
        #[serde(default)]
        rotation_rad: f64,
    },
    /// Quadratic channel `max(0, 1 − (v/w_x)² − (u/w_y)²)` where `u` runs
    /// along the long axis (at `angle_rad` from +x) and `v` across it.
    HarmonicChannel {
        center_um: [f64; 2],
        half_width_x_um: f64,
        half_width_y_um: f64,
        #[serde(default)]
        angle_rad: f64,
    },
    Union {
        members: Vec<ShapeSpec>,
    },
}

impl ShapeSpec {
    pub fn disk(center_um: [f64; 2], radius_um: f64) -> Self {
        Self::Disk {
            center_um,
            radius_um,
        }
    }

    /// Round harmonic well of waist `w`, i.e. a channel with equal widths.
    pub fn round_harmonic(center_um: [f64; 2], waist_um: f64) -> Self {
        Self::HarmonicChannel {
            center_um,
            half_width_x_um: waist_um,
            half_width_y_um: waist_um,
            angle_rad: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), PatternError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(PatternError::InvalidShape(format!("{name} must be positive, got {v}")))
            }
        };
        match self {
            Self::Disk { radius_um, .. } => positive("radius", *radius_um),
            Self::Annulus {
                inner_radius_um,
                outer_radius_um,
                ..
            } => {
                positive("inner radius", *inner_radius_um)?;
                positive("outer radius", *outer_radius_um)?;
                if inner_radius_um >= outer_radius_um {
                    return Err(PatternError::InvalidShape("annulus inner radius must be below outer".into()));
                }
                Ok(())
            }
            Self::Line { count, radius_um, .. } => {
                positive("radius", *radius_um)?;
                if *count == 0 {
                    return Err(PatternError::InvalidShape("line needs at least one disk".into()));
                }
                Ok(())
            }
            Self::Grid {
                rows,
                cols,
                spacing_um,
                radius_um,
                ..
            } => {
                positive("radius", *radius_um)?;
                positive("spacing", *spacing_um)?;
                if *rows == 0 || *cols == 0 {
                    return Err(PatternError::InvalidShape("grid needs at least one site".into()));
                }
                Ok(())
            }
            Self::Star {
                points,
                outer_radius_um,
                inner_radius_um,
                ..
            } => {
                positive("outer radius", *outer_radius_um)?;
                positive("inner radius", *inner_radius_um)?;
                if *points < 3 {
                    return Err(PatternError::InvalidShape("star needs at least three points".into()));
                }
                if inner_radius_um >= outer_radius_um {
                    return Err(PatternError::InvalidShape("star inner radius must be below outer".into()));
                }
                Ok(())
            }
            Self::HarmonicChannel {
                half_width_x_um,
                half_width_y_um,
                ..
            } => {
                positive("half width x", *half_width_x_um)?;
                positive("half width y", *half_width_y_um)
            }
            Self::Union { members } => {
                if members.is_empty() {
                    return Err(PatternError::InvalidShape("union has no members".into()));
                }
                members.iter().try_for_each(ShapeSpec::validate)
            }
        }
    }

    /// Axis-aligned bounding box `[x_min, x_max, y_min, y_max]` in µm.
    pub fn bounds_um(&self) -> [f64; 4] {
        let around = |c: [f64; 2], r: f64| [c[0] - r, c[0] + r, c[1] - r, c[1] + r];
        match self {
            Self::Disk { center_um, radius_um } => around(*center_um, *radius_um),
            Self::Annulus {
                center_um,
                outer_radius_um,
                ..
            } => around(*center_um, *outer_radius_um),
            Self::Star {
                center_um,
                outer_radius_um,
                ..
            } => around(*center_um, *outer_radius_um),
            Self::Line {
                start_um,
                end_um,
                radius_um,
                ..
            } => [
                start_um[0].min(end_um[0]) - radius_um,
                start_um[0].max(end_um[0]) + radius_um,
                start_um[1].min(end_um[1]) - radius_um,
                start_um[1].max(end_um[1]) + radius_um,
            ],
            Self::Grid {
                center_um,
                rows,
                cols,
                spacing_um,
                radius_um,
            } => {
                let hx = (*cols as f64 - 1.0) * spacing_um / 2.0 + radius_um;
                let hy = (*rows as f64 - 1.0) * spacing_um / 2.0 + radius_um;
                [center_um[0] - hx, center_um[0] + hx, center_um[1] - hy, center_um[1] + hy]
            }
            Self::HarmonicChannel {
                center_um,
                half_width_x_um,
                half_width_y_um,
                angle_rad,
            } => {
                // Extent of a rotated ellipse with semi-axes w_y along (cos, sin) and w_x across.
                let (s, c) = angle_rad.sin_cos();
                let hx = ((half_width_y_um * c).powi(2) + (half_width_x_um * s).powi(2)).sqrt();
                let hy = ((half_width_y_um * s).powi(2) + (half_width_x_um * c).powi(2)).sqrt();
                [center_um[0] - hx, center_um[0] + hx, center_um[1] - hy, center_um[1] + hy]
            }
            Self::Union { members } => members.iter().map(ShapeSpec::bounds_um).fold(
                [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY],
                |a, b| [a[0].min(b[0]), a[1].max(b[1]), a[2].min(b[2]), a[3].max(b[3])],
            ),
        }
    }

    /// Target value at an image-plane point given in µm.
    pub fn value_at(&self, x: f64, y: f64) -> f64 {
        let inside = |b: bool| if b { 1.0 } else { 0.0 };
        match self {
            Self::Disk { center_um, radius_um } => {
                inside(hypot(x - center_um[0], y - center_um[1]) <= *radius_um)
            }
            Self::Annulus {
                center_um,
                inner_radius_um,
                outer_radius_um,
            } => {
                let r = hypot(x - center_um[0], y - center_um[1]);
                inside(r >= *inner_radius_um && r <= *outer_radius_um)
            }
            Self::Line {
                start_um,
                end_um,
                count,
                radius_um,
            } => {
                let n = *count;
                inside((0..n).any(|i| {
                    let t = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
                    let cx = start_um[0] + t * (end_um[0] - start_um[0]);
                    let cy = start_um[1] + t * (end_um[1] - start_um[1]);
                    hypot(x - cx, y - cy) <= *radius_um
                }))
            }
            Self::Grid {
                center_um,
                rows,
                cols,
                spacing_um,
                radius_um,
            } => {
                // Nearest site only: sites are assumed not to overlap.
                let fx = (x - center_um[0]) / spacing_um + (*cols as f64 - 1.0) / 2.0;
                let fy = (y - center_um[1]) / spacing_um + (*rows as f64 - 1.0) / 2.0;
                let ix = fx.round().clamp(0.0, *cols as f64 - 1.0);
                let iy = fy.round().clamp(0.0, *rows as f64 - 1.0);
                let dx = (fx - ix) * spacing_um;
                let dy = (fy - iy) * spacing_um;
                inside(hypot(dx, dy) <= *radius_um)
            }
            Self::Star {
                center_um,
                points,
                outer_radius_um,
                inner_radius_um,
                rotation_rad,
            } => inside(star_contains(
                x - center_um[0],
                y - center_um[1],
                *points,
                *outer_radius_um,
                *inner_radius_um,
                *rotation_rad,
            )),
            Self::HarmonicChannel {
                center_um,
                half_width_x_um,
                half_width_y_um,
                angle_rad,
            } => {
                let (u, v) = channel_coordinates(x - center_um[0], y - center_um[1], *angle_rad);
                (1.0 - (v / half_width_x_um).powi(2) - (u / half_width_y_um).powi(2)).max(0.0)
            }
            Self::Union { members } => members.iter().map(|m| m.value_at(x, y)).fold(0.0, f64::max),
        }
    }
}

fn hypot(a: f64, b: f64) -> f64 {
    a.hypot(b)
}

/// Rotates an offset into channel coordinates `(along, across)`.
pub fn channel_coordinates(dx: f64, dy: f64, angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (dx * c + dy * s, -dx * s + dy * c)
}

/// Vertices of a regular star polygon, alternating outer and inner radius,
/// starting with an outer tip at `rotation`.
pub fn star_vertices(points: usize, outer: f64, inner: f64, rotation: f64) -> Vec<(f64, f64)> {
    (0..2 * points)
        .map(|k| {
            let r = if k % 2 == 0 { outer } else { inner };
            let a = rotation + k as f64 * PI / points as f64;
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

/// The star is star-shaped about its centre, so a point is inside iff it lies
/// on the inner side of the edge spanning its angular sector.
fn star_contains(x: f64, y: f64, points: usize, outer: f64, inner: f64, rotation: f64) -> bool {
    let r = x.hypot(y);
    if r <= inner {
        return true;
    }
    if r > outer {
        return false;
    }
    let half_step = PI / points as f64;
    let a = (y.atan2(x) - rotation).rem_euclid(2.0 * PI);
    let k = (a / half_step).floor();
    let a0 = k * half_step + rotation;
    let a1 = a0 + half_step;
    let (r0, r1) = if (k as usize).is_multiple_of(2) { (outer, inner) } else { (inner, outer) };
    let (x0, y0) = (r0 * a0.cos(), r0 * a0.sin());
    let (x1, y1) = (r1 * a1.cos(), r1 * a1.sin());
    // Origin and point must be on the same side of the edge.
    let side = |px: f64, py: f64| (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
    side(x, y) * side(0.0, 0.0) >= 0.0
}

/// Normalized target intensity sampled on the mirror grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetIntensityMap {
    geometry: DeviceGeometry,
    grid: Array2<f64>,
    annotation: Option<ShapeSpec>,
}

impl TargetIntensityMap {
    pub fn zeros(geometry: DeviceGeometry) -> Self {
        Self {
            grid: Array2::zeros(geometry.dim()),
            geometry,
            annotation: None,
        }
    }

    pub fn constant(geometry: DeviceGeometry, value: f64) -> Result<Self, PatternError> {
        Self::from_grid(geometry, Array2::from_elem(geometry.dim(), value), None)
    }

    pub fn from_grid(
        geometry: DeviceGeometry,
        grid: Array2<f64>,
        annotation: Option<ShapeSpec>,
    ) -> Result<Self, PatternError> {
        if grid.dim() != geometry.dim() {
            return Err(PatternError::DimensionMismatch {
                expected: geometry.dim(),
                found: grid.dim(),
            });
        }
        if let Some(&bad) = grid.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(PatternError::ValueOutOfRange(bad));
        }
        Ok(Self {
            geometry,
            grid,
            annotation,
        })
    }

    pub fn geometry(&self) -> &DeviceGeometry {
        &self.geometry
    }

    pub fn grid(&self) -> &Array2<f64> {
        &self.grid
    }

    pub fn annotation(&self) -> Option<&ShapeSpec> {
        self.annotation.as_ref()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.grid.dim()
    }

    /// Fill fractions whose coherent image reproduces this map as intensity.
    ///
    /// Coherent imaging low-passes the field amplitude, so a local fill
    /// fraction `f` images to intensity `f²`.
    pub fn amplitude_target(&self) -> Self {
        Self {
            geometry: self.geometry,
            grid: self.grid.mapv(f64::sqrt),
            annotation: self.annotation.clone(),
        }
    }
}

/// Samples a shape at every mirror centre.
pub fn rasterize_primitive(shape: &ShapeSpec, geometry: &DeviceGeometry) -> Result<TargetIntensityMap, PatternError> {
    shape.validate()?;
    let b = shape.bounds_um();
    let (hx, hy) = geometry.half_extent();
    let (hx_um, hy_um) = (hx / MICRO, hy / MICRO);
    let tol = 1e-9;
    let x_ext = b[0].abs().max(b[1].abs());
    let y_ext = b[2].abs().max(b[3].abs());
    if x_ext > hx_um + tol {
        return Err(PatternError::OutOfBounds {
            axis: "x",
            extent_um: x_ext,
            limit_um: hx_um,
        });
    }
    if y_ext > hy_um + tol {
        return Err(PatternError::OutOfBounds {
            axis: "y",
            extent_um: y_ext,
            limit_um: hy_um,
        });
    }

    let mut grid = Array2::zeros(geometry.dim());
    let (c0, c1) = geometry.index_range(b[0] * MICRO, b[1] * MICRO, geometry.cols);
    let (r0, r1) = geometry.index_range(b[2] * MICRO, b[3] * MICRO, geometry.rows);
    for r in r0..=r1 {
        for c in c0..=c1 {
            let (x, y) = geometry.mirror_center(r, c);
            grid[[r, c]] = shape.value_at(x / MICRO, y / MICRO).clamp(0.0, 1.0);
        }
    }
    Ok(TargetIntensityMap {
        geometry: *geometry,
        grid,
        annotation: Some(shape.clone()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DitherMethod {
    /// Blockwise 4×4 Bayer quantization.
    #[default]
    Ordered,
    /// Floyd–Steinberg error diffusion in raster order.
    ErrorDiffusion,
}

/// Quantizes a target map to binary mirror states.
pub fn dither(map: &TargetIntensityMap, method: DitherMethod) -> MirrorPattern {
    let values = map.grid.mapv(|v| v.clamp(0.0, 1.0));
    let cells = match method {
        DitherMethod::Ordered => ordered_dither(&values),
        DitherMethod::ErrorDiffusion => error_diffusion(values),
    };
    MirrorPattern {
        geometry: map.geometry,
        cells,
    }
}

/// Number of mirrors a 4×4 block switches on for a mean level `v`.
pub fn block_level(v: f64) -> usize {
    ((DITHER_LEVELS as f64 * v).round() as usize).min(DITHER_LEVELS)
}

fn ordered_dither(values: &Array2<f64>) -> Array2<bool> {
    let (rows, cols) = values.dim();
    let mut out = Array2::from_elem((rows, cols), false);
    for br in (0..rows).step_by(4) {
        for bc in (0..cols).step_by(4) {
            // Cells beyond the map edge count as zero padding.
            let mut sum = 0.0;
            for r in br..(br + 4).min(rows) {
                for c in bc..(bc + 4).min(cols) {
                    sum += values[[r, c]];
                }
            }
            let level = block_level(sum / DITHER_LEVELS as f64);
            for r in br..(br + 4).min(rows) {
                for c in bc..(bc + 4).min(cols) {
                    out[[r, c]] = (BAYER_4X4[r - br][c - bc] as usize) < level;
                }
            }
        }
    }
    out
}

fn error_diffusion(mut work: Array2<f64>) -> Array2<bool> {
    let (rows, cols) = work.dim();
    let mut out = Array2::from_elem((rows, cols), false);
    for r in 0..rows {
        for c in 0..cols {
            let old = work[[r, c]];
            let on = old >= 0.5;
            out[[r, c]] = on;
            let err = old - if on { 1.0 } else { 0.0 };
            if c + 1 < cols {
                work[[r, c + 1]] += err * 7.0 / 16.0;
            }
            if r + 1 < rows {
                if c > 0 {
                    work[[r + 1, c - 1]] += err * 3.0 / 16.0;
                }
                work[[r + 1, c]] += err * 5.0 / 16.0;
                if c + 1 < cols {
                    work[[r + 1, c + 1]] += err * 1.0 / 16.0;
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComposeMode {
    #[default]
    Max,
}

/// Cellwise combination of several maps.
pub fn compose(maps: &[&TargetIntensityMap], mode: ComposeMode) -> Result<TargetIntensityMap, PatternError> {
    let first = maps.first().ok_or(PatternError::EmptyComposition)?;
    let mut grid = first.grid.clone();
    for m in &maps[1..] {
        if m.dim() != first.dim() {
            return Err(PatternError::DimensionMismatch {
                expected: first.dim(),
                found: m.dim(),
            });
        }
        match mode {
            ComposeMode::Max => grid.zip_mut_with(&m.grid, |a, &b| *a = a.max(b)),
        }
    }
    let annotation = maps
        .iter()
        .map(|m| m.annotation.clone())
        .collect::<Option<Vec<_>>>()
        .map(|members| if members.len() == 1 { members[0].clone() } else { ShapeSpec::Union { members } });
    Ok(TargetIntensityMap {
        geometry: first.geometry,
        grid,
        annotation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DeviceGeometry {
        DeviceGeometry::new(64, 64)
    }

    #[test]
    fn disk_radius_in_mirrors() {
        let g = DeviceGeometry::default();
        let map = rasterize_primitive(&ShapeSpec::disk([0.0, 0.0], 3.0), &g).unwrap();
        let radius_mirrors: f64 = 3.0 * 57.0 / 13.7;
        assert!((radius_mirrors - 12.48).abs() < 0.01);
        for ((r, c), &v) in map.grid().indexed_iter() {
            let dr = r as f64 + 0.5 - 384.0;
            let dc = c as f64 + 0.5 - 512.0;
            let expect = if dr.hypot(dc) <= radius_mirrors { 1.0 } else { 0.0 };
            assert_eq!(v, expect, "mirror ({r},{c})");
        }
    }

    #[test]
    fn harmonic_channel_endpoints() {
        let ch = ShapeSpec::HarmonicChannel {
            center_um: [0.0, 0.0],
            half_width_x_um: 6.0,
            half_width_y_um: 26.0,
            angle_rad: PI / 2.0,
        };
        assert_eq!(ch.value_at(0.0, 0.0), 1.0);
        // Across the channel (x, since the long axis points along y).
        assert!(ch.value_at(6.0, 0.0).abs() < 1e-12);
        assert!(ch.value_at(0.0, 26.0).abs() < 1e-12);
        assert!((ch.value_at(0.0, 13.0) - 0.75).abs() < 1e-12);
        assert_eq!(ch.value_at(7.0, 0.0), 0.0);
    }

    #[test]
    fn out_of_bounds_shape_is_rejected() {
        let g = small();
        // 64 mirrors * 0.2404 µm ≈ 15.4 µm wide.
        let err = rasterize_primitive(&ShapeSpec::disk([0.0, 0.0], 9.0), &g).unwrap_err();
        assert!(matches!(err, PatternError::OutOfBounds { .. }));
    }

    #[test]
    fn invalid_shapes() {
        assert!(ShapeSpec::disk([0.0, 0.0], -1.0).validate().is_err());
        assert!(ShapeSpec::Union { members: vec![] }.validate().is_err());
        let star = ShapeSpec::Star {
            center_um: [0.0, 0.0],
            points: 5,
            outer_radius_um: 2.0,
            inner_radius_um: 3.0,
            rotation_rad: 0.0,
        };
        assert!(star.validate().is_err());
    }

    #[test]
    fn ordered_dither_levels() {
        let g = small();
        for (v, expect) in [(0.5, 8), (1.0, 16), (0.0, 0), (1.0 / 16.0, 1)] {
            let p = dither(&TargetIntensityMap::constant(g, v).unwrap(), DitherMethod::Ordered);
            for br in (0..64).step_by(4) {
                for bc in (0..64).step_by(4) {
                    let on = (br..br + 4)
                        .flat_map(|r| (bc..bc + 4).map(move |c| (r, c)))
                        .filter(|&(r, c)| p.get(r, c))
                        .count();
                    assert_eq!(on, expect, "level {v}");
                }
            }
        }
    }

    #[test]
    fn one_sixteenth_lights_lowest_bayer_cell() {
        // Index 0 of the Bayer matrix sits at (0, 0) of each block.
        let g = small();
        let p = dither(&TargetIntensityMap::constant(g, 1.0 / 16.0).unwrap(), DitherMethod::Ordered);
        for r in 0..64 {
            for c in 0..64 {
                assert_eq!(p.get(r, c), r % 4 == 0 && c % 4 == 0);
            }
        }
    }

    #[test]
    fn ordered_dither_pads_partial_blocks() {
        let g = DeviceGeometry::new(6, 6);
        let p = dither(&TargetIntensityMap::constant(g, 1.0).unwrap(), DitherMethod::Ordered);
        // The bottom-right block has 4 in-map cells at 1.0, so its level is 4,
        // but of Bayer indices 0..4 only index 0 lies inside the map.
        let corner: usize = (4..6).flat_map(|r| (4..6).map(move |c| (r, c))).filter(|&(r, c)| p.get(r, c)).count();
        assert_eq!(corner, 1);
        assert!(p.get(0, 0) && p.get(3, 3));
    }

    #[test]
    fn error_diffusion_preserves_mean() {
        let g = small();
        for v in [0.1, 0.37, 0.5, 0.81] {
            let p = dither(&TargetIntensityMap::constant(g, v).unwrap(), DitherMethod::ErrorDiffusion);
            let mean = p.count_on() as f64 / (64.0 * 64.0);
            assert!((mean - v).abs() < 0.01, "{v} -> {mean}");
        }
    }

    #[test]
    fn dither_clamps_out_of_range_cells() {
        // from_grid refuses out-of-range values, so inputs are always clamped already;
        // saturated values still map to all-on.
        let g = small();
        let p = dither(&TargetIntensityMap::constant(g, 1.0).unwrap(), DitherMethod::ErrorDiffusion);
        assert_eq!(p.count_on(), 64 * 64);
        assert!(TargetIntensityMap::constant(g, 1.5).is_err());
    }

    #[test]
    fn compose_identities() {
        let g = DeviceGeometry::new(128, 128);
        let a = rasterize_primitive(&ShapeSpec::disk([2.0, -1.0], 3.0), &g).unwrap();
        let zero = TargetIntensityMap::zeros(g);
        assert_eq!(compose(&[&a, &zero], ComposeMode::Max).unwrap().grid(), a.grid());
        assert_eq!(compose(&[&a, &a], ComposeMode::Max).unwrap().grid(), a.grid());
        assert!(compose(&[], ComposeMode::Max).is_err());
        let other = TargetIntensityMap::zeros(DeviceGeometry::new(64, 128));
        assert!(matches!(
            compose(&[&a, &other], ComposeMode::Max),
            Err(PatternError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn compose_two_disjoint_disks() {
        let g = DeviceGeometry::new(128, 128);
        let a = rasterize_primitive(&ShapeSpec::disk([-7.0, 0.0], 3.0), &g).unwrap();
        let b = rasterize_primitive(&ShapeSpec::disk([7.0, 0.0], 3.0), &g).unwrap();
        let both = compose(&[&a, &b], ComposeMode::Max).unwrap();
        for ((r, c), &v) in both.grid().indexed_iter() {
            let (x, y) = g.mirror_center(r, c);
            let (x, y) = (x / MICRO, y / MICRO);
            let inside = (x + 7.0).hypot(y) <= 3.0 || (x - 7.0).hypot(y) <= 3.0;
            assert_eq!(v, if inside { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn frame_rate_range() {
        let g = small();
        let f = vec![Arc::new(MirrorPattern::all_off(g))];
        assert!(FrameSequence::new(f.clone(), 3_999.0).is_err());
        assert!(FrameSequence::new(f.clone(), 20_001.0).is_err());
        assert!(FrameSequence::new(f.clone(), 4_000.0).is_ok());
        assert!(FrameSequence::new(f, 20_000.0).is_ok());
        let mixed = vec![
            Arc::new(MirrorPattern::all_off(g)),
            Arc::new(MirrorPattern::all_off(DeviceGeometry::new(32, 64))),
        ];
        assert!(FrameSequence::new(mixed, 10_000.0).is_err());
    }

    #[test]
    fn from_cells_checks_dimensions() {
        let g = small();
        assert!(MirrorPattern::from_cells(g, Array2::from_elem((64, 63), false)).is_err());
    }
}
