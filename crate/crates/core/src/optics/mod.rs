//! Coherent imaging of mirror patterns into the atom plane and axial
//! propagation near the retro-reflecting mirror.
//!
//! The image-plane amplitude is the mirror fill pattern, demagnified and
//! multiplied by the illumination, convolved with the coherent amplitude PSF.
//! Intensity is its square, scaled so a large all-on region reaches
//! [`OpticalSystem::peak_intensity`].

mod fft;
mod psf;
mod standing_wave;

use ndarray::{s, Array2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::MICRO;
use crate::patterns::{DeviceGeometry, MirrorPattern};

pub use fft::{convolve_same, frequencies, next_fast_len, Fft2};
pub use psf::{
    airy_amplitude, amplitude_fwhm, encircled_energy, first_zero_radius, reduced_radius, sample_intensity_psf,
    PsfKernel, PsfModel, J1_FIRST_ZERO,
};
pub use standing_wave::{
    axial_standing_wave, axial_standing_wave_window, fringe_period, visibility, IntensityField3D, PixelWindow,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpticsError {
    #[error("sampling too coarse: {0}")]
    Sampling(String),
    #[error("invalid optical system: {0}")]
    InvalidSystem(String),
    #[error("pattern is {found:?} mirrors but the window needs {expected:?}")]
    GeometryMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("{0}")]
    OutOfRange(String),
}

/// Intensity profile of the beam illuminating the device.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Illumination {
    #[default]
    Uniform,
    /// Gaussian beam centred on the device whose intensity at the device
    /// corners is `1 - relative_variation` of the centre value.
    Gaussian { relative_variation: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpticalSystem {
    pub demagnification: f64,
    pub numerical_aperture: f64,
    /// Trapping laser wavelength, m.
    pub wavelength: f64,
    /// Height of the image plane above the mirror, m.
    pub mirror_distance: f64,
    /// Amplitude reflection coefficient of the mirror.
    pub mirror_reflectivity: f64,
    /// Intensity of a large all-on region, W/m².
    pub peak_intensity: f64,
    pub illumination: Illumination,
    /// Image-plane samples per mirror pitch along each axis.
    pub grid_oversample: usize,
    pub psf_model: PsfModel,
    /// PSF support radius in units of the first-zero radius.
    pub psf_truncation: f64,
}

impl Default for OpticalSystem {
    fn default() -> Self {
        Self {
            demagnification: 57.0,
            numerical_aperture: 0.52,
            wavelength: 785e-9,
            mirror_distance: 500.0 * MICRO,
            mirror_reflectivity: 1.0,
            // 30 W/mm²
            peak_intensity: 30.0e6,
            illumination: Illumination::Uniform,
            grid_oversample: 2,
            psf_model: PsfModel::Airy,
            psf_truncation: 10.0,
        }
    }
}

impl OpticalSystem {
    pub fn validate(&self) -> Result<(), OpticsError> {
        let bad = |m: &str| Err(OpticsError::InvalidSystem(m.to_string()));
        if !(self.numerical_aperture > 0.0 && self.numerical_aperture < 1.0) {
            return bad("numerical aperture must lie in (0, 1)");
        }
        if !(self.wavelength > 0.0 && self.mirror_distance > 0.0 && self.demagnification > 0.0) {
            return bad("lengths and demagnification must be positive");
        }
        if !(0.0..=1.0).contains(&self.mirror_reflectivity) {
            return bad("mirror reflectivity must lie in [0, 1]");
        }
        if !(self.peak_intensity >= 0.0 && self.peak_intensity.is_finite()) {
            return bad("peak intensity must be finite and non-negative");
        }
        if self.grid_oversample == 0 {
            return bad("grid oversample must be at least 1");
        }
        if !(self.psf_truncation >= 1.0) {
            return bad("PSF truncation must cover at least the first dark ring");
        }
        if let Illumination::Gaussian { relative_variation } = self.illumination {
            if !(0.0..1.0).contains(&relative_variation) {
                return bad("illumination variation must lie in [0, 1)");
            }
        }
        Ok(())
    }

    pub fn first_zero_radius(&self) -> f64 {
        first_zero_radius(self.wavelength, self.numerical_aperture)
    }

    /// Amplitude PSF sampled at `spacing`.
    pub fn psf_kernel(&self, spacing: f64) -> Result<PsfKernel, OpticsError> {
        self.validate()?;
        self.check_spacing(spacing)?;
        Ok(PsfKernel::amplitude(
            self.wavelength,
            self.numerical_aperture,
            spacing,
            self.psf_truncation * self.first_zero_radius(),
            self.psf_model,
        ))
    }

    /// Grid spacing of image-plane fields for a device.
    pub fn image_spacing(&self, geometry: &DeviceGeometry) -> f64 {
        geometry.pitch / self.demagnification / self.grid_oversample as f64
    }

    fn check_spacing(&self, spacing: f64) -> Result<(), OpticsError> {
        let limit = 0.5 * self.first_zero_radius();
        if !(spacing > 0.0) || spacing > limit {
            return Err(OpticsError::Sampling(format!(
                "grid spacing {:.3} um exceeds half the PSF radius ({:.3} um)",
                spacing / MICRO,
                limit / MICRO
            )));
        }
        Ok(())
    }

    /// Relative illumination intensity at image-plane point `(x, y)`.
    fn illumination_at(&self, geometry: &DeviceGeometry, x: f64, y: f64) -> f64 {
        match self.illumination {
            Illumination::Uniform => 1.0,
            Illumination::Gaussian { relative_variation } => {
                let (hx, hy) = geometry.half_extent();
                let corner2 = hx * hx + hy * hy;
                ((x * x + y * y) / corner2 * (1.0 - relative_variation).ln()).exp()
            }
        }
    }
}

/// Module-level PSF entry point.
pub fn psf_kernel(system: &OpticalSystem, spacing: f64) -> Result<PsfKernel, OpticsError> {
    system.psf_kernel(spacing)
}

/// Rectangular block of mirrors, in mirror indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MirrorWindow {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl MirrorWindow {
    pub fn full(geometry: &DeviceGeometry) -> Self {
        Self {
            row0: 0,
            col0: 0,
            rows: geometry.rows,
            cols: geometry.cols,
        }
    }

    /// Window of `rows × cols` mirrors centred on the device.
    pub fn centered(geometry: &DeviceGeometry, rows: usize, cols: usize) -> Result<Self, OpticsError> {
        if rows > geometry.rows || cols > geometry.cols || rows == 0 || cols == 0 {
            return Err(OpticsError::GeometryMismatch {
                expected: (rows, cols),
                found: geometry.dim(),
            });
        }
        Ok(Self {
            row0: (geometry.rows - rows) / 2,
            col0: (geometry.cols - cols) / 2,
            rows,
            cols,
        })
    }
}

/// Complex scalar field on a regular grid. `origin` is the `(x, y)` position
/// of sample `[0, 0]`; rows run along y.
#[derive(Debug, Clone)]
pub struct ComplexField2D {
    pub data: Array2<Complex64>,
    pub spacing: f64,
    pub origin: [f64; 2],
}

impl ComplexField2D {
    pub fn intensity(&self) -> IntensityField2D {
        IntensityField2D {
            data: self.data.mapv(|a| a.norm_sqr()),
            spacing: self.spacing,
            origin: self.origin,
        }
    }

    /// Embeds the field in a zero background of `rows × cols` samples,
    /// keeping it centred.
    pub fn padded(&self, rows: usize, cols: usize) -> Result<Self, OpticsError> {
        let (ny, nx) = self.data.dim();
        if rows < ny || cols < nx {
            return Err(OpticsError::GeometryMismatch {
                expected: (rows, cols),
                found: (ny, nx),
            });
        }
        let (r0, c0) = ((rows - ny) / 2, (cols - nx) / 2);
        let mut data = Array2::from_elem((rows, cols), Complex64::new(0.0, 0.0));
        data.slice_mut(s![r0..r0 + ny, c0..c0 + nx]).assign(&self.data);
        Ok(Self {
            data,
            spacing: self.spacing,
            origin: [
                self.origin[0] - c0 as f64 * self.spacing,
                self.origin[1] - r0 as f64 * self.spacing,
            ],
        })
    }
}

/// Non-negative intensity (W/m²) on a regular grid.
#[derive(Debug, Clone)]
pub struct IntensityField2D {
    pub data: Array2<f64>,
    pub spacing: f64,
    pub origin: [f64; 2],
}

impl IntensityField2D {
    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn x_at(&self, col: usize) -> f64 {
        self.origin[0] + col as f64 * self.spacing
    }

    pub fn y_at(&self, row: usize) -> f64 {
        self.origin[1] + row as f64 * self.spacing
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(0.0, f64::max)
    }

    /// Index of the brightest sample.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = ((0, 0), f64::NEG_INFINITY);
        for (idx, &v) in self.data.indexed_iter() {
            if v > best.1 {
                best = (idx, v);
            }
        }
        best.0
    }

    /// Bilinear interpolation; `None` outside the grid.
    pub fn sample(&self, x: f64, y: f64) -> Option<f64> {
        let (ny, nx) = self.dim();
        let fx = (x - self.origin[0]) / self.spacing;
        let fy = (y - self.origin[1]) / self.spacing;
        if !(fx >= 0.0 && fy >= 0.0 && fx <= (nx - 1) as f64 && fy <= (ny - 1) as f64) {
            return None;
        }
        let (c, r) = ((fx.floor() as usize).min(nx.saturating_sub(2)), (fy.floor() as usize).min(ny.saturating_sub(2)));
        let (tx, ty) = (fx - c as f64, fy - r as f64);
        if nx < 2 || ny < 2 {
            return Some(self.data[[r, c]]);
        }
        let d = &self.data;
        Some(
            (1.0 - ty) * ((1.0 - tx) * d[[r, c]] + tx * d[[r, c + 1]])
                + ty * ((1.0 - tx) * d[[r + 1, c]] + tx * d[[r + 1, c + 1]]),
        )
    }

    /// Intensity-weighted mean position.
    pub fn centroid(&self) -> Option<[f64; 2]> {
        let (mut w, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for ((r, c), &v) in self.data.indexed_iter() {
            w += v;
            sx += v * self.x_at(c);
            sy += v * self.y_at(r);
        }
        (w > 0.0).then(|| [sx / w, sy / w])
    }

    /// Full width at half maximum along the line through `(x0, y0)` with
    /// direction angle `angle`, relative to the value at `(x0, y0)`.
    pub fn fwhm_through(&self, x0: f64, y0: f64, angle: f64) -> Option<f64> {
        let peak = self.sample(x0, y0)?;
        let half = peak / 2.0;
        let step = self.spacing / 8.0;
        let (ux, uy) = (angle.cos(), angle.sin());
        let edge = |sign: f64| -> Option<f64> {
            let mut prev: (f64, f64) = (0.0, peak);
            for i in 1.. {
                let t = sign * i as f64 * step;
                let v = self.sample(x0 + t * ux, y0 + t * uy)?;
                if v < half {
                    return Some(prev.0.abs() + (t.abs() - prev.0.abs()) * (prev.1 - half) / (prev.1 - v));
                }
                prev = (t, v);
            }
            None
        };
        Some(edge(1.0)? + edge(-1.0)?)
    }

    /// Spot size: mean of the x and y widths through the centroid.
    pub fn spot_fwhm(&self) -> Option<f64> {
        let [x, y] = self.centroid()?;
        Some(0.5 * (self.fwhm_through(x, y, 0.0)? + self.fwhm_through(x, y, std::f64::consts::FRAC_PI_2)?))
    }

    /// Sum of intensity times cell area, W.
    pub fn power(&self) -> f64 {
        self.data.sum() * self.spacing * self.spacing
    }
}

/// Image-plane complex amplitude (√(W/m²)) of a mirror pattern, optionally
/// restricted to a window of mirrors. Mirrors outside the window still
/// contribute through the PSF tails.
pub fn image_plane_field(
    pattern: &MirrorPattern,
    system: &OpticalSystem,
    window: Option<MirrorWindow>,
) -> Result<ComplexField2D, OpticsError> {
    system.validate()?;
    let geometry = *pattern.geometry();
    if (geometry.demagnification - system.demagnification).abs() > 1e-9 * system.demagnification {
        return Err(OpticsError::InvalidSystem(format!(
            "device demagnification {} differs from the optical system's {}",
            geometry.demagnification, system.demagnification
        )));
    }
    let win = window.unwrap_or_else(|| MirrorWindow::full(&geometry));
    if win.rows == 0 || win.cols == 0 || win.row0 + win.rows > geometry.rows || win.col0 + win.cols > geometry.cols {
        return Err(OpticsError::GeometryMismatch {
            expected: (win.row0 + win.rows, win.col0 + win.cols),
            found: geometry.dim(),
        });
    }
    let k = system.grid_oversample;
    let spacing = system.image_spacing(&geometry);
    let kernel = system.psf_kernel(spacing)?;
    let pitch = geometry.image_pitch();

    // Extend the window by the kernel support so edge mirrors are included.
    let margin = kernel.half_width().div_ceil(k);
    let r_lo = win.row0.saturating_sub(margin);
    let c_lo = win.col0.saturating_sub(margin);
    let r_hi = (win.row0 + win.rows + margin).min(geometry.rows);
    let c_hi = (win.col0 + win.cols + margin).min(geometry.cols);
    let (ny, nx) = ((r_hi - r_lo) * k, (c_hi - c_lo) * k);

    let sub_x = |col: usize, j: usize| (col as f64 - geometry.cols as f64 / 2.0 + (j as f64 + 0.5) / k as f64) * pitch;
    let sub_y = |row: usize, j: usize| (row as f64 - geometry.rows as f64 / 2.0 + (j as f64 + 0.5) / k as f64) * pitch;

    let cells = pattern.cells();
    let fill = Array2::from_shape_fn((ny, nx), |(r, c)| {
        let (mr, mc) = (r_lo + r / k, c_lo + c / k);
        if cells[[mr, mc]] {
            system
                .illumination_at(&geometry, sub_x(mc, c % k), sub_y(mr, r % k))
                .sqrt()
        } else {
            0.0
        }
    });
    let amp = convolve_same(&fill, &kernel.weights);

    let (or, oc) = ((win.row0 - r_lo) * k, (win.col0 - c_lo) * k);
    let scale = system.peak_intensity.sqrt();
    let data = amp
        .slice(s![or..or + win.rows * k, oc..oc + win.cols * k])
        .mapv(|a| Complex64::new(a * scale, 0.0));
    Ok(ComplexField2D {
        data,
        spacing,
        origin: [sub_x(win.col0, 0), sub_y(win.row0, 0)],
    })
}

/// Image-plane intensity (W/m²) of a mirror pattern.
pub fn image_plane_intensity(
    pattern: &MirrorPattern,
    system: &OpticalSystem,
    window: Option<MirrorWindow>,
) -> Result<IntensityField2D, OpticsError> {
    Ok(image_plane_field(pattern, system, window)?.intensity())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patterns::DeviceGeometry;

    fn small() -> DeviceGeometry {
        DeviceGeometry::new(96, 128)
    }

    #[test]
    fn all_on_reaches_peak_intensity() {
        let g = small();
        let sys = OpticalSystem::default();
        let f = image_plane_intensity(&MirrorPattern::all_on(g), &sys, None).unwrap();
        let (ny, nx) = f.dim();
        let centre = f.data[[ny / 2, nx / 2]];
        assert!((centre / 30.0e6 - 1.0).abs() < 1e-3, "{centre}");
    }

    #[test]
    fn all_off_is_dark() {
        let f = image_plane_intensity(&MirrorPattern::all_off(small()), &OpticalSystem::default(), None).unwrap();
        assert!(f.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn block_spot_width() {
        let g = small();
        let mut p = MirrorPattern::all_off(g);
        for r in 46..50 {
            for c in 62..66 {
                p.set(r, c, true);
            }
        }
        let f = image_plane_intensity(&p, &OpticalSystem::default(), None).unwrap();
        let [x, y] = f.centroid().unwrap();
        assert!(x.abs() < 1e-9 && y.abs() < 1e-9);
        let w = f.spot_fwhm().unwrap();
        assert!((0.8e-6..=1.2e-6).contains(&w), "{w}");
    }

    #[test]
    fn coarse_grid_is_rejected() {
        let sys = OpticalSystem {
            grid_oversample: 1,
            numerical_aperture: 0.9,
            wavelength: 300e-9,
            ..OpticalSystem::default()
        };
        let err = image_plane_intensity(&MirrorPattern::all_on(small()), &sys, None).unwrap_err();
        assert!(matches!(err, OpticsError::Sampling(_)));
    }

    #[test]
    fn window_matches_full_field() {
        let g = small();
        let mut p = MirrorPattern::all_off(g);
        for r in 40..52 {
            for c in 60..70 {
                p.set(r, c, (r + c) % 3 != 0);
            }
        }
        let sys = OpticalSystem::default();
        let full = image_plane_intensity(&p, &sys, None).unwrap();
        let win = MirrorWindow {
            row0: 30,
            col0: 50,
            rows: 32,
            cols: 32,
        };
        let part = image_plane_intensity(&p, &sys, Some(win)).unwrap();
        let k = sys.grid_oversample;
        let peak = full.max();
        for ((r, c), &v) in part.data.indexed_iter() {
            let w = full.data[[r + 30 * k, c + 50 * k]];
            assert!((v - w).abs() < 1e-9 * peak);
        }
        assert!((part.x_at(0) - full.x_at(50 * k)).abs() < 1e-15);
    }

    #[test]
    fn gaussian_illumination_corner_drop() {
        let g = small();
        let sys = OpticalSystem {
            illumination: Illumination::Gaussian { relative_variation: 0.3 },
            ..OpticalSystem::default()
        };
        let (hx, hy) = g.half_extent();
        assert!((sys.illumination_at(&g, hx, hy) - 0.7).abs() < 1e-12);
        assert!((sys.illumination_at(&g, 0.0, 0.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_systems() {
        for sys in [
            OpticalSystem {
                numerical_aperture: 1.2,
                ..OpticalSystem::default()
            },
            OpticalSystem {
                mirror_reflectivity: -0.1,
                ..OpticalSystem::default()
            },
            OpticalSystem {
                wavelength: 0.0,
                ..OpticalSystem::default()
            },
        ] {
            assert!(sys.validate().is_err());
        }
    }

    #[test]
    fn bilinear_sampling() {
        let f = IntensityField2D {
            data: Array2::from_shape_fn((3, 3), |(r, c)| (r * 3 + c) as f64),
            spacing: 1.0,
            origin: [0.0, 0.0],
        };
        assert_eq!(f.sample(0.5, 0.5), Some(2.0));
        assert_eq!(f.sample(2.0, 2.0), Some(8.0));
        assert_eq!(f.sample(2.1, 0.0), None);
    }
}
