//! Diffraction-limited point spread functions.
//!
//! The coherent amplitude PSF of a circular pupil is `2·J₁(v)/v` with
//! `v = 2π·NA·r/λ`; its first zero sits at `v = 3.8317`, i.e. `0.61·λ/NA`.
//! Fluorescence imaging is incoherent and uses the intensity PSF
//! `(2·J₁(v)/v)²`.

use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// First zero of the Bessel function J₁.
pub const J1_FIRST_ZERO: f64 = 3.831_705_970_207_512;

/// `v` at which `2·J₁(v)/v = ½`.
const AMPLITUDE_HALF_MAX_V: f64 = 2.215_089_367_724_233;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsfModel {
    #[default]
    Airy,
    /// Gaussian with the same full width at half maximum as the Airy kernel.
    Gaussian,
}

/// Normalized Airy amplitude `2·J₁(v)/v`.
pub fn airy_amplitude(v: f64) -> f64 {
    if v.abs() < 1e-8 {
        1.0 - v * v / 8.0
    } else {
        2.0 * libm::j1(v) / v
    }
}

/// Reduced radial coordinate `v = 2π·NA·r/λ`.
pub fn reduced_radius(r: f64, wavelength: f64, na: f64) -> f64 {
    2.0 * PI * na * r / wavelength
}

/// Radius of the first dark ring, `J1_FIRST_ZERO/(2π)·λ/NA ≈ 0.61·λ/NA`.
pub fn first_zero_radius(wavelength: f64, na: f64) -> f64 {
    J1_FIRST_ZERO / (2.0 * PI) * wavelength / na
}

/// Full width at half maximum of the amplitude kernel.
pub fn amplitude_fwhm(wavelength: f64, na: f64) -> f64 {
    2.0 * AMPLITUDE_HALF_MAX_V * wavelength / (2.0 * PI * na)
}

/// Fraction of the intensity PSF's power inside reduced radius `v`
/// (Rayleigh's encircled-energy formula).
pub fn encircled_energy(v: f64) -> f64 {
    let (j0, j1) = (libm::j0(v), libm::j1(v));
    1.0 - j0 * j0 - j1 * j1
}

/// Sampled real kernel; weights sum to one so a uniform field passes with
/// unit gain.
#[derive(Debug, Clone)]
pub struct PsfKernel {
    pub weights: Array2<f64>,
    pub spacing: f64,
    pub model: PsfModel,
}

impl PsfKernel {
    /// Builds the coherent amplitude kernel on a grid of pitch `spacing`,
    /// truncated at `radius`.
    pub fn amplitude(wavelength: f64, na: f64, spacing: f64, radius: f64, model: PsfModel) -> Self {
        let half = (radius / spacing).ceil() as isize;
        let n = (2 * half + 1) as usize;
        let sigma = amplitude_fwhm(wavelength, na) / (2.0 * (2.0 * 2f64.ln()).sqrt());
        let mut weights = Array2::from_shape_fn((n, n), |(r, c)| {
            let dx = (c as isize - half) as f64 * spacing;
            let dy = (r as isize - half) as f64 * spacing;
            let rho = dx.hypot(dy);
            if rho > radius {
                return 0.0;
            }
            match model {
                PsfModel::Airy => airy_amplitude(reduced_radius(rho, wavelength, na)),
                PsfModel::Gaussian => (-rho * rho / (2.0 * sigma * sigma)).exp(),
            }
        });
        let sum = weights.sum();
        weights.mapv_inplace(|w| w / sum);
        Self { weights, spacing, model }
    }

    pub fn integral(&self) -> f64 {
        self.weights.sum()
    }

    pub fn half_width(&self) -> usize {
        self.weights.nrows() / 2
    }

    /// Radial profile along +x from the centre, `(r, value)`.
    pub fn radial_profile(&self) -> Vec<(f64, f64)> {
        let h = self.half_width();
        (0..=h).map(|i| (i as f64 * self.spacing, self.weights[[h, h + i]])).collect()
    }

    /// First sign change of the sampled radial profile, linearly interpolated.
    pub fn measured_first_zero(&self) -> Option<f64> {
        let prof = self.radial_profile();
        prof.windows(2).find_map(|w| {
            let ((r0, a), (r1, b)) = (w[0], w[1]);
            (a > 0.0 && b <= 0.0).then(|| r0 + (r1 - r0) * a / (a - b))
        })
    }

    /// FWHM of the sampled radial profile, linearly interpolated.
    pub fn measured_fwhm(&self) -> Option<f64> {
        let prof = self.radial_profile();
        let peak = prof[0].1;
        prof.windows(2).find_map(|w| {
            let ((r0, a), (r1, b)) = (w[0], w[1]);
            (a >= peak / 2.0 && b < peak / 2.0).then(|| 2.0 * (r0 + (r1 - r0) * (a - peak / 2.0) / (a - b)))
        })
    }
}

/// Samples an offset from the incoherent Airy intensity PSF by inverting the
/// encircled-energy curve. `u_radius` and `u_angle` are uniform in `[0, 1)`.
pub fn sample_intensity_psf(u_radius: f64, u_angle: f64, wavelength: f64, na: f64) -> (f64, f64) {
    // Encircled energy saturates slowly; cap the tail at a generous radius.
    let target = u_radius.min(0.995);
    let (mut lo, mut hi) = (0.0, 1.0);
    while encircled_energy(hi) < target {
        hi *= 2.0;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if encircled_energy(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let v = 0.5 * (lo + hi);
    let r = v * wavelength / (2.0 * PI * na);
    let a = 2.0 * PI * u_angle;
    (r * a.cos(), r * a.sin())
}

#[cfg(test)]
mod tests {
    use super::*;

    const LAMBDA: f64 = 785e-9;
    const NA: f64 = 0.52;

    #[test]
    fn first_zero_at_0921_um() {
        let r = first_zero_radius(LAMBDA, NA);
        assert!((r - 0.921e-6).abs() < 1e-9, "{r}");
        assert!(airy_amplitude(J1_FIRST_ZERO).abs() < 1e-12);
    }

    #[test]
    fn half_max_constant() {
        assert!((airy_amplitude(AMPLITUDE_HALF_MAX_V) - 0.5).abs() < 1e-7);
        let fwhm = amplitude_fwhm(LAMBDA, NA);
        assert!((0.8e-6..=1.2e-6).contains(&fwhm), "{fwhm}");
    }

    #[test]
    fn kernel_is_normalized() {
        for model in [PsfModel::Airy, PsfModel::Gaussian] {
            let k = PsfKernel::amplitude(LAMBDA, NA, 0.12e-6, 8e-6, model);
            assert!((k.integral() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sampled_kernel_widths() {
        let k = PsfKernel::amplitude(LAMBDA, NA, 0.12e-6, 8e-6, PsfModel::Airy);
        let z = k.measured_first_zero().unwrap();
        assert!((z - first_zero_radius(LAMBDA, NA)).abs() < 0.12e-6);
        let fwhm = k.measured_fwhm().unwrap();
        assert!((fwhm - amplitude_fwhm(LAMBDA, NA)).abs() < 0.02e-6, "{fwhm}");
        let g = PsfKernel::amplitude(LAMBDA, NA, 0.12e-6, 8e-6, PsfModel::Gaussian);
        assert!((g.measured_fwhm().unwrap() - fwhm).abs() < 0.02e-6);
    }

    #[test]
    fn encircled_energy_limits() {
        assert!(encircled_energy(0.0).abs() < 1e-12);
        // 83.8% of the power falls inside the first dark ring.
        assert!((encircled_energy(J1_FIRST_ZERO) - 0.838).abs() < 1e-3);
    }

    #[test]
    fn sampled_offsets_follow_encircled_energy() {
        let r0 = first_zero_radius(LAMBDA, NA);
        let n = 2000;
        let inside = (0..n)
            .filter(|i| {
                let u = (*i as f64 + 0.5) / n as f64;
                let (x, y) = sample_intensity_psf(u, 0.3, LAMBDA, NA);
                x.hypot(y) <= r0
            })
            .count();
        assert!((inside as f64 / n as f64 - 0.838).abs() < 2e-3);
    }
}
