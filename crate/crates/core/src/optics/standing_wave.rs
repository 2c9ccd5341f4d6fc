//! Axial propagation by the angular-spectrum method and the standing wave
//! formed with the mirror reflection.
//!
//! The image plane sits at `z = 0` and the mirror at `z = -d`. Light travels
//! towards the mirror, so the forward field at height `z` has propagated a
//! distance `-z`, and the reflected field a distance `2d + z`. Both share the
//! image-plane spectrum `S`:
//!
//! `I(z) = |F⁻¹[S · (H(-z) - r·H(2d + z))]|²`, `H(s) = exp(i·k_z·s)`,
//!
//! with the reflection phase π folded into the minus sign.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use ndarray::{s, Array2, Array3, Axis};
use num_complex::Complex64;
use rayon::prelude::*;

use super::fft::{frequencies, Fft2};
use super::{ComplexField2D, IntensityField2D, OpticalSystem, OpticsError};

/// Rectangular block of field samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelWindow {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Intensity on a stack of transverse slices, indexed `[z, y, x]`.
#[derive(Debug, Clone)]
pub struct IntensityField3D {
    pub data: Array3<f64>,
    pub spacing: f64,
    pub origin: [f64; 2],
    /// Heights of the slices above the image plane, m.
    pub z: Vec<f64>,
    pub wavelength: f64,
}

impl IntensityField3D {
    pub fn z_step(&self) -> f64 {
        if self.z.len() < 2 {
            0.0
        } else {
            self.z[1] - self.z[0]
        }
    }

    pub fn slice(&self, index: usize) -> IntensityField2D {
        IntensityField2D {
            data: self.data.index_axis(Axis(0), index).to_owned(),
            spacing: self.spacing,
            origin: self.origin,
        }
    }

    /// Intensity at one transverse sample for every slice.
    pub fn axial_profile(&self, row: usize, col: usize) -> Vec<f64> {
        self.data.slice(s![.., row, col]).to_vec()
    }

    pub fn nearest_slice(&self, z: f64) -> usize {
        let mut best = 0;
        for (i, zi) in self.z.iter().enumerate() {
            if (zi - z).abs() < (self.z[best] - z).abs() {
                best = i;
            }
        }
        best
    }
}

/// Propagates `field` to `samples` evenly spaced heights in `z_range` and
/// adds the mirror reflection.
pub fn axial_standing_wave(
    field: &ComplexField2D,
    system: &OpticalSystem,
    z_range: (f64, f64),
    samples: usize,
) -> Result<IntensityField3D, OpticsError> {
    let (rows, cols) = field.data.dim();
    axial_standing_wave_window(
        field,
        system,
        z_range,
        samples,
        PixelWindow {
            row0: 0,
            col0: 0,
            rows,
            cols,
        },
    )
}

/// As [`axial_standing_wave`], keeping only `window` of each slice. The
/// propagation still uses the full field.
pub fn axial_standing_wave_window(
    field: &ComplexField2D,
    system: &OpticalSystem,
    z_range: (f64, f64),
    samples: usize,
    window: PixelWindow,
) -> Result<IntensityField3D, OpticsError> {
    system.validate()?;
    let (ny, nx) = field.data.dim();
    if window.rows == 0 || window.cols == 0 || window.row0 + window.rows > ny || window.col0 + window.cols > nx {
        return Err(OpticsError::GeometryMismatch {
            expected: (window.row0 + window.rows, window.col0 + window.cols),
            found: (ny, nx),
        });
    }
    let (z0, z1) = z_range;
    if samples < 2 || !(z1 > z0) {
        return Err(OpticsError::OutOfRange("z range needs at least two increasing samples".into()));
    }
    if z0 > 0.0 || z1 < 0.0 {
        return Err(OpticsError::OutOfRange("z range must span the image plane".into()));
    }
    let d = system.mirror_distance;
    if z0 <= -d {
        return Err(OpticsError::OutOfRange("z range reaches below the mirror".into()));
    }
    let lambda = system.wavelength;
    let dz = (z1 - z0) / (samples - 1) as f64;
    if dz > lambda / 8.0 {
        return Err(OpticsError::Sampling(format!(
            "z step {:.1} nm exceeds lambda/8 = {:.1} nm",
            dz * 1e9,
            lambda / 8.0 * 1e9
        )));
    }
    let z: Vec<f64> = (0..samples).map(|i| z0 + i as f64 * dz).collect();

    let fft = Fft2::new(ny, nx);
    let mut spectrum = field.data.clone();
    fft.forward(&mut spectrum);

    let fx = frequencies(nx, field.spacing);
    let fy = frequencies(ny, field.spacing);
    let k = 2.0 * PI / lambda;
    // k_z for propagating components; evanescent ones are dropped.
    let kz = Array2::from_shape_fn((ny, nx), |(r, c)| {
        let kt2 = (2.0 * PI) * (2.0 * PI) * (fx[c] * fx[c] + fy[r] * fy[r]);
        (k * k > kt2).then(|| (k * k - kt2).sqrt())
    });
    let (lx, ly) = (nx as f64 * field.spacing, ny as f64 * field.spacing);
    // Band limit that keeps the transfer function alias free over distance s.
    let limit = |s: f64, l: f64| 1.0 / (lambda * ((2.0 * s / l).powi(2) + 1.0).sqrt());
    let refl = system.mirror_reflectivity;

    let slices: Vec<Array2<f64>> = z
        .par_iter()
        .map(|&zi| {
            let (s_fwd, s_ref) = (-zi, 2.0 * d + zi);
            let (fxf, fyf) = (limit(s_fwd, lx), limit(s_fwd, ly));
            let (fxr, fyr) = (limit(s_ref, lx), limit(s_ref, ly));
            let mut buf = Array2::from_shape_fn((ny, nx), |(r, c)| {
                let Some(kzv) = kz[[r, c]] else {
                    return Complex64::new(0.0, 0.0);
                };
                let (ax, ay) = (fx[c].abs(), fy[r].abs());
                let mut h = Complex64::new(0.0, 0.0);
                if ax <= fxf && ay <= fyf {
                    h += Complex64::from_polar(1.0, kzv * s_fwd);
                }
                if refl > 0.0 && ax <= fxr && ay <= fyr {
                    h -= Complex64::from_polar(refl, kzv * s_ref);
                }
                spectrum[[r, c]] * h
            });
            fft.inverse(&mut buf);
            buf.slice(s![
                window.row0..window.row0 + window.rows,
                window.col0..window.col0 + window.cols
            ])
            .mapv(|a| a.norm_sqr())
        })
        .collect();

    let mut data = Array3::zeros((samples, window.rows, window.cols));
    for (i, sl) in slices.into_iter().enumerate() {
        data.index_axis_mut(Axis(0), i).assign(&sl);
    }
    Ok(IntensityField3D {
        data,
        spacing: field.spacing,
        origin: [
            field.origin[0] + window.col0 as f64 * field.spacing,
            field.origin[1] + window.row0 as f64 * field.spacing,
        ],
        z,
        wavelength: lambda,
    })
}

/// Fringe visibility around height `z`, averaged over the transverse core.
///
/// Each pixel's axial profile over one fringe period centred on `z` is fitted
/// with `a + b·cos(2kz) + c·sin(2kz)`; its visibility is `√(b² + c²)/a`. The
/// core is the set of pixels whose mean `a` is at least half the largest.
pub fn visibility(field: &IntensityField3D, z: f64) -> Result<f64, OpticsError> {
    let period = field.wavelength / 2.0;
    let dz = field.z_step();
    if field.z.len() < 2 || dz > field.wavelength / 8.0 {
        return Err(OpticsError::Sampling("fringes are not resolved along z".into()));
    }
    let tol = 1e-9 * dz;
    let (lo, hi) = (z - period / 2.0, z + period / 2.0);
    if lo < field.z[0] - tol || hi > field.z[field.z.len() - 1] + tol {
        return Err(OpticsError::OutOfRange(format!(
            "one fringe period around z = {:.3} um is not inside the sampled range",
            z * 1e6
        )));
    }
    // Half-open window of exactly one period.
    let idx: Vec<usize> = (0..field.z.len())
        .filter(|&i| field.z[i] >= lo - tol && field.z[i] < hi - tol)
        .collect();
    if idx.len() < 4 {
        return Err(OpticsError::Sampling("fewer than four samples per fringe".into()));
    }
    let q = 4.0 * PI / field.wavelength;
    let basis = |zi: f64| Vector3::new(1.0, (q * zi).cos(), (q * zi).sin());
    let mut normal = Matrix3::zeros();
    for &i in &idx {
        let b = basis(field.z[i]);
        normal += b * b.transpose();
    }
    let inv = normal
        .try_inverse()
        .ok_or_else(|| OpticsError::Sampling("degenerate fringe sampling".into()))?;

    let (_, ny, nx) = field.data.dim();
    let mut coef = Vec::with_capacity(ny * nx);
    for r in 0..ny {
        for c in 0..nx {
            let mut rhs = Vector3::zeros();
            for &i in &idx {
                rhs += basis(field.z[i]) * field.data[[i, r, c]];
            }
            coef.push(inv * rhs);
        }
    }
    let amax = coef.iter().map(|v| v[0]).fold(0.0, f64::max);
    if amax <= 0.0 {
        return Ok(0.0);
    }
    let core: Vec<f64> = coef
        .iter()
        .filter(|v| v[0] >= 0.5 * amax)
        .map(|v| v[1].hypot(v[2]) / v[0])
        .collect();
    Ok(core.iter().sum::<f64>() / core.len() as f64)
}

/// Mean spacing of axial intensity maxima at the brightest transverse pixel
/// of the slice nearest the image plane, refined by parabolic interpolation.
pub fn fringe_period(field: &IntensityField3D) -> Result<f64, OpticsError> {
    let centre = field.slice(field.nearest_slice(0.0));
    let (r, c) = centre.argmax();
    let prof = field.axial_profile(r, c);
    let dz = field.z_step();
    let mut peaks = Vec::new();
    for i in 1..prof.len().saturating_sub(1) {
        let (a, b, cc) = (prof[i - 1], prof[i], prof[i + 1]);
        if b > a && b >= cc {
            let denom = a - 2.0 * b + cc;
            let off = if denom != 0.0 { 0.5 * (a - cc) / denom } else { 0.0 };
            peaks.push(field.z[i] + off * dz);
        }
    }
    if peaks.len() < 2 {
        return Err(OpticsError::Sampling("fewer than two axial maxima in range".into()));
    }
    Ok((peaks[peaks.len() - 1] - peaks[0]) / (peaks.len() - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane_wave(n: usize, spacing: f64) -> ComplexField2D {
        ComplexField2D {
            data: Array2::from_elem((n, n), Complex64::new(1.0, 0.0)),
            spacing,
            origin: [0.0, 0.0],
        }
    }

    fn system(refl: f64) -> OpticalSystem {
        OpticalSystem {
            mirror_reflectivity: refl,
            ..OpticalSystem::default()
        }
    }

    fn period_range(lambda: f64) -> ((f64, f64), usize) {
        ((-lambda, lambda), 33)
    }

    #[test]
    fn plane_wave_perfect_standing_wave() {
        let sys = system(1.0);
        let (range, n) = period_range(sys.wavelength);
        let f = axial_standing_wave(&plane_wave(16, 0.12e-6), &sys, range, n).unwrap();
        let v = visibility(&f, 0.0).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "{v}");
        let p = fringe_period(&f).unwrap();
        assert!((p - sys.wavelength / 2.0).abs() < f.z_step(), "{p}");
        // Nodes have zero intensity, antinodes four times the incident.
        let prof = f.axial_profile(3, 3);
        let max = prof.iter().cloned().fold(0.0, f64::max);
        assert!((max - 4.0).abs() < 0.02);
    }

    #[test]
    fn no_reflection_no_fringes() {
        let sys = system(0.0);
        let (range, n) = period_range(sys.wavelength);
        let f = axial_standing_wave(&plane_wave(16, 0.12e-6), &sys, range, n).unwrap();
        assert!(visibility(&f, 0.0).unwrap() < 1e-12);
        assert!(f.data.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn coarse_z_step_is_rejected() {
        let sys = system(1.0);
        let err = axial_standing_wave(&plane_wave(8, 0.12e-6), &sys, (-1e-6, 1e-6), 5).unwrap_err();
        assert!(matches!(err, OpticsError::Sampling(_)));
    }

    #[test]
    fn range_must_span_image_plane() {
        let sys = system(1.0);
        let err = axial_standing_wave(&plane_wave(8, 0.12e-6), &sys, (0.1e-6, 1e-6), 40).unwrap_err();
        assert!(matches!(err, OpticsError::OutOfRange(_)));
    }

    #[test]
    fn visibility_needs_resolved_period() {
        let sys = system(1.0);
        let f = axial_standing_wave(&plane_wave(8, 0.12e-6), &sys, (-0.1e-6, 0.1e-6), 9).unwrap();
        assert!(matches!(visibility(&f, 0.0), Err(OpticsError::OutOfRange(_))));
    }

    #[test]
    fn free_propagation_conserves_power() {
        // Gaussian beam, no mirror: transverse power is constant along z.
        let n = 128;
        let dx = 0.12e-6;
        let w = 2e-6;
        let data = Array2::from_shape_fn((n, n), |(r, c)| {
            let (x, y) = ((c as f64 - 64.0) * dx, (r as f64 - 64.0) * dx);
            Complex64::new((-(x * x + y * y) / (w * w)).exp(), 0.0)
        });
        let field = ComplexField2D {
            data,
            spacing: dx,
            origin: [-64.0 * dx, -64.0 * dx],
        };
        let sys = system(0.0);
        let f = axial_standing_wave(&field, &sys, (-4e-6, 4e-6), 129).unwrap();
        let p0 = f.slice(f.nearest_slice(0.0)).power();
        for i in 0..f.z.len() {
            let p = f.slice(i).power();
            assert!((p / p0 - 1.0).abs() < 0.01);
        }
    }
}
