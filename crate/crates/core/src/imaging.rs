//! Light-sheet fluorescence detection and synthetic camera images.
//!
//! Only atoms inside the thin resonant sheet scatter light. Each one yields a
//! Poisson-distributed number of detected photons whose positions follow the
//! incoherent Airy PSF of the collection lens.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::MICRO;
use crate::dynamics::{AtomEnsemble, Region};
use crate::optics::sample_intensity_psf;
use crate::potential::{scattering_rate, AtomSpecies};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImagingError {
    #[error("detected photons per atom must be positive")]
    ZeroBudget,
    #[error("no alive atoms to image")]
    EmptyEnsemble,
    #[error("invalid imaging config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LightSheet {
    /// Full thickness, m.
    pub thickness: f64,
    /// m
    pub width: f64,
    /// `ω_laser − ω_transition`, rad/s.
    pub detuning: f64,
    /// W
    pub power: f64,
    pub retro_reflected: bool,
    /// s
    pub exposure: f64,
    /// Height of the sheet centre, m.
    pub plane_height: f64,
    /// Scattering rate used for the photon budget, 1/s. The sheet detuning
    /// compensates the trap light shift, so in-trap atoms scatter at this
    /// nominal rate; `None` uses the free-space rate computed from the sheet
    /// intensity instead.
    pub nominal_rate: Option<f64>,
}

impl Default for LightSheet {
    fn default() -> Self {
        Self {
            thickness: 9.7 * MICRO,
            width: 5.1e-3,
            detuning: 2.0 * PI * 2e6,
            power: 7e-6,
            retro_reflected: true,
            exposure: 90e-6,
            plane_height: 0.0,
            nominal_rate: Some(16e6),
        }
    }
}

impl LightSheet {
    pub fn validate(&self) -> Result<(), ImagingError> {
        if !(self.thickness > 0.0 && self.width > 0.0 && self.power > 0.0 && self.exposure >= 0.0) {
            return Err(ImagingError::Invalid(
                "sheet thickness, width and power must be positive and exposure non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Mean intensity inside the sheet, W/m².
    pub fn intensity(&self) -> f64 {
        let passes = if self.retro_reflected { 2.0 } else { 1.0 };
        passes * self.power / (self.width * self.thickness)
    }

    /// Free-space scattering rate at the sheet intensity and detuning, 1/s.
    pub fn computed_rate(&self, species: &AtomSpecies) -> f64 {
        scattering_rate(self.intensity(), self.detuning, species)
    }

    pub fn rate(&self, species: &AtomSpecies) -> f64 {
        self.nominal_rate.unwrap_or_else(|| self.computed_rate(species))
    }

    pub fn contains(&self, z: f64) -> bool {
        (z - self.plane_height).abs() < 0.5 * self.thickness
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionModel {
    pub eta_lens: f64,
    pub eta_loss: f64,
    pub eta_qe: f64,
    /// Measured overall efficiency; overrides the component product when set.
    pub calibrated_total: Option<f64>,
    /// Object-space pixel size, m.
    pub pixel_size: f64,
    /// Image size in pixels, `(rows, cols)`.
    pub image_shape: (usize, usize),
    /// Object-space position of the image centre, m.
    pub image_center: [f64; 2],
    /// Fluorescence wavelength, m.
    pub wavelength: f64,
    pub numerical_aperture: f64,
}

impl Default for DetectionModel {
    fn default() -> Self {
        Self {
            eta_lens: 0.076,
            eta_loss: 0.51,
            eta_qe: 0.41,
            calibrated_total: Some(0.015),
            pixel_size: 0.5 * MICRO,
            image_shape: (128, 128),
            image_center: [0.0, 0.0],
            wavelength: 780e-9,
            numerical_aperture: 0.52,
        }
    }
}

impl DetectionModel {
    pub fn validate(&self) -> Result<(), ImagingError> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !(unit(self.eta_lens) && unit(self.eta_loss) && unit(self.eta_qe)) {
            return Err(ImagingError::Invalid("efficiencies must lie in (0, 1]".into()));
        }
        if let Some(t) = self.calibrated_total {
            if !unit(t) {
                return Err(ImagingError::Invalid("calibrated efficiency must lie in (0, 1]".into()));
            }
        }
        if !(self.pixel_size > 0.0 && self.image_shape.0 > 0 && self.image_shape.1 > 0) {
            return Err(ImagingError::Invalid("pixel size and image shape must be positive".into()));
        }
        if !(self.numerical_aperture > 0.0 && self.numerical_aperture < 1.0 && self.wavelength > 0.0) {
            return Err(ImagingError::Invalid("invalid collection optics".into()));
        }
        Ok(())
    }

    /// `η_lens·η_loss·η_QE`.
    pub fn eta_chain(&self) -> f64 {
        self.eta_lens * self.eta_loss * self.eta_qe
    }

    pub fn eta_total(&self) -> f64 {
        self.calibrated_total.unwrap_or_else(|| self.eta_chain())
    }

    /// Object-space position of the corner of pixel `[0, 0]`, m.
    pub fn image_origin(&self) -> [f64; 2] {
        let (rows, cols) = self.image_shape;
        [
            self.image_center[0] - 0.5 * cols as f64 * self.pixel_size,
            self.image_center[1] - 0.5 * rows as f64 * self.pixel_size,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotonBudget {
    pub emitted: f64,
    pub detected: f64,
}

/// Photons scattered and detected per in-sheet atom during one exposure.
pub fn photon_budget(sheet: &LightSheet, detection: &DetectionModel, species: &AtomSpecies) -> PhotonBudget {
    let emitted = sheet.rate(species) * sheet.exposure;
    PhotonBudget {
        emitted,
        detected: emitted * detection.eta_total(),
    }
}

/// Detected photon counts per camera pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct FluorescenceImage {
    /// Indexed `[row (y), col (x)]`.
    pub counts: Array2<u32>,
    /// m
    pub pixel_size: f64,
    /// Corner of pixel `[0, 0]`, m.
    pub origin: [f64; 2],
    /// s
    pub exposure: f64,
    pub seed: u64,
}

impl FluorescenceImage {
    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn pixel_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            self.origin[0] + (col as f64 + 0.5) * self.pixel_size,
            self.origin[1] + (row as f64 + 0.5) * self.pixel_size,
        ]
    }

    /// Sum of counts in pixels whose centres lie inside `region`.
    pub fn counts_in(&self, region: &Region) -> u64 {
        self.counts
            .indexed_iter()
            .filter(|((r, c), _)| {
                let [x, y] = self.pixel_center(*r, *c);
                region.contains(&crate::Vec3::new(x, y, 0.0))
            })
            .map(|(_, &v)| v as u64)
            .sum()
    }

    /// Count-weighted mean position, m.
    pub fn centroid(&self) -> Option<[f64; 2]> {
        let total = self.total();
        if total == 0 {
            return None;
        }
        let (mut sx, mut sy) = (0.0, 0.0);
        for ((r, c), &v) in self.counts.indexed_iter() {
            let [x, y] = self.pixel_center(r, c);
            sx += x * v as f64;
            sy += y * v as f64;
        }
        Some([sx / total as f64, sy / total as f64])
    }
}

/// Renders one exposure of the ensemble.
///
/// Every alive atom inside the sheet contributes `Poisson(detected)` photons;
/// each lands at the atom's in-plane position plus an offset drawn from the
/// Airy intensity PSF. Photons falling outside the image are lost. Atom `i`
/// draws from random stream `i`, so the result does not depend on scheduling.
pub fn render_fluorescence(
    ensemble: &AtomEnsemble,
    sheet: &LightSheet,
    detection: &DetectionModel,
    seed: u64,
) -> Result<FluorescenceImage, ImagingError> {
    sheet.validate()?;
    detection.validate()?;
    let budget = photon_budget(sheet, detection, ensemble.species());
    let (rows, cols) = detection.image_shape;
    let origin = detection.image_origin();
    let px = detection.pixel_size;

    let deposits: Vec<Vec<(usize, usize)>> = ensemble
        .positions()
        .par_iter()
        .zip(ensemble.alive().par_iter())
        .enumerate()
        .map(|(i, (p, &alive))| {
            if !alive || !sheet.contains(p.z) || budget.detected <= 0.0 {
                return Vec::new();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let n = Poisson::new(budget.detected).map(|d| d.sample(&mut rng) as u64).unwrap_or(0);
            let mut out = Vec::with_capacity(n as usize);
            for _ in 0..n {
                let (dx, dy) = sample_intensity_psf(rng.gen(), rng.gen(), detection.wavelength, detection.numerical_aperture);
                let fx = ((p.x + dx - origin[0]) / px).floor();
                let fy = ((p.y + dy - origin[1]) / px).floor();
                if fx >= 0.0 && fy >= 0.0 && (fx as usize) < cols && (fy as usize) < rows {
                    out.push((fy as usize, fx as usize));
                }
            }
            out
        })
        .collect();

    let mut counts = Array2::<u32>::zeros((rows, cols));
    for atom in deposits {
        for (r, c) in atom {
            counts[[r, c]] += 1;
        }
    }
    Ok(FluorescenceImage {
        counts,
        pixel_size: px,
        origin,
        exposure: sheet.exposure,
        seed,
    })
}

/// Atom number implied by the counts inside `region`.
pub fn estimate_atom_number(image: &FluorescenceImage, budget: &PhotonBudget, region: &Region) -> Result<f64, ImagingError> {
    if !(budget.detected > 0.0) {
        return Err(ImagingError::ZeroBudget);
    }
    Ok(image.counts_in(region) as f64 / budget.detected)
}

/// Mean and standard error of the atom-number estimate over several images.
pub fn average_atom_number(
    images: &[FluorescenceImage],
    budget: &PhotonBudget,
    region: &Region,
) -> Result<(f64, f64), ImagingError> {
    if images.is_empty() {
        return Err(ImagingError::Invalid("no images to average".into()));
    }
    let n: Vec<f64> = images
        .iter()
        .map(|im| estimate_atom_number(im, budget, region))
        .collect::<Result<_, _>>()?;
    let m = n.len() as f64;
    let mean = n.iter().sum::<f64>() / m;
    let err = if n.len() > 1 {
        (n.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0) / m).sqrt()
    } else {
        0.0
    };
    Ok((mean, err))
}

/// Horizontal axis along which the side view integrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SideAxis {
    X,
    Y,
}

/// Column density seen from the side, atoms/µm², indexed `[z bin, h bin]`
/// with `h` the horizontal axis left in view.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnDensityImage {
    pub density: Array2<f64>,
    /// m
    pub bin_size: f64,
    /// `(h, z)` corner of bin `[0, 0]`, m.
    pub origin: [f64; 2],
    pub axis: SideAxis,
}

impl ColumnDensityImage {
    /// Integral of the density, atoms.
    pub fn atom_count(&self) -> f64 {
        let area_um2 = (self.bin_size / MICRO).powi(2);
        self.density.sum() * area_um2
    }
}

/// Projects alive atoms along `axis` onto `bin_size` square bins spanning
/// their extent.
pub fn render_side_column_density(
    ensemble: &AtomEnsemble,
    axis: SideAxis,
    bin_size: f64,
) -> Result<ColumnDensityImage, ImagingError> {
    if !(bin_size > 0.0) {
        return Err(ImagingError::Invalid("bin size must be positive".into()));
    }
    let pts: Vec<(f64, f64)> = ensemble
        .alive_states()
        .map(|(p, _)| (if axis == SideAxis::X { p.y } else { p.x }, p.z))
        .collect();
    if pts.is_empty() {
        return Err(ImagingError::EmptyEnsemble);
    }
    let fold = |f: fn(f64, f64) -> f64, init: f64, sel: fn(&(f64, f64)) -> f64| pts.iter().map(sel).fold(init, f);
    let h0 = (fold(f64::min, f64::INFINITY, |p| p.0) / bin_size).floor() * bin_size;
    let z0 = (fold(f64::min, f64::INFINITY, |p| p.1) / bin_size).floor() * bin_size;
    let h1 = fold(f64::max, f64::NEG_INFINITY, |p| p.0);
    let z1 = fold(f64::max, f64::NEG_INFINITY, |p| p.1);
    let nh = ((h1 - h0) / bin_size).floor() as usize + 1;
    let nz = ((z1 - z0) / bin_size).floor() as usize + 1;
    let mut density = Array2::zeros((nz, nh));
    let per_atom = 1.0 / (bin_size / MICRO).powi(2);
    for (h, z) in pts {
        let c = (((h - h0) / bin_size).floor() as usize).min(nh - 1);
        let r = (((z - z0) / bin_size).floor() as usize).min(nz - 1);
        density[[r, c]] += per_atom;
    }
    Ok(ColumnDensityImage {
        density,
        bin_size,
        origin: [h0, z0],
        axis,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Vec3;

    fn rb() -> AtomSpecies {
        AtomSpecies::rubidium87()
    }

    fn atoms(points: Vec<Vec3>) -> AtomEnsemble {
        let n = points.len();
        AtomEnsemble::from_parts(points, vec![Vec3::zeros(); n], rb(), 0).unwrap()
    }

    #[test]
    fn budget_numbers() {
        let b = photon_budget(&LightSheet::default(), &DetectionModel::default(), &rb());
        assert!((b.emitted - 1440.0).abs() < 1e-9);
        assert!((b.detected - 21.6).abs() < 1e-9);
        let chain = DetectionModel::default().eta_chain();
        assert!((chain - 0.0159).abs() < 1e-4);
        let dark = LightSheet {
            exposure: 0.0,
            ..LightSheet::default()
        };
        let b = photon_budget(&dark, &DetectionModel::default(), &rb());
        assert_eq!((b.emitted, b.detected), (0.0, 0.0));
    }

    #[test]
    fn sheet_intensity_and_rate() {
        let s = LightSheet::default();
        assert!((s.intensity() - 2.0 * 7e-6 / (5.1e-3 * 9.7e-6)).abs() < 1e-9);
        let r = s.computed_rate(&rb());
        assert!((14e6..20e6).contains(&r));
    }

    #[test]
    fn empty_ensemble_gives_dark_image() {
        let e = AtomEnsemble::empty(rb(), 0);
        let im = render_fluorescence(&e, &LightSheet::default(), &DetectionModel::default(), 1).unwrap();
        assert_eq!(im.total(), 0);
    }

    #[test]
    fn atoms_outside_sheet_are_dark() {
        let e = atoms(vec![Vec3::new(0.0, 0.0, 10e-6); 20]);
        let im = render_fluorescence(&e, &LightSheet::default(), &DetectionModel::default(), 1).unwrap();
        assert_eq!(im.total(), 0);
    }

    #[test]
    fn single_atom_counts_are_poissonian() {
        let e = atoms(vec![Vec3::zeros()]);
        let n = 100;
        let mean = (0..n)
            .map(|s| render_fluorescence(&e, &LightSheet::default(), &DetectionModel::default(), s).unwrap().total() as f64)
            .sum::<f64>()
            / n as f64;
        assert!((mean - 21.6).abs() < 2.0 * (21.6f64 / n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn estimate_arithmetic() {
        let budget = PhotonBudget {
            emitted: 1440.0,
            detected: 21.6,
        };
        let mut counts = Array2::zeros((4, 4));
        counts[[1, 1]] = 200;
        counts[[2, 3]] = 16;
        let im = FluorescenceImage {
            counts,
            pixel_size: 1e-6,
            origin: [0.0, 0.0],
            exposure: 90e-6,
            seed: 0,
        };
        assert!((estimate_atom_number(&im, &budget, &Region::All).unwrap() - 10.0).abs() < 1e-12);
        let zero = PhotonBudget {
            emitted: 0.0,
            detected: 0.0,
        };
        assert_eq!(estimate_atom_number(&im, &zero, &Region::All), Err(ImagingError::ZeroBudget));
        let dark = FluorescenceImage {
            counts: Array2::zeros((4, 4)),
            ..im
        };
        assert_eq!(estimate_atom_number(&dark, &budget, &Region::All).unwrap(), 0.0);
    }

    #[test]
    fn image_centroid_tracks_atoms() {
        let e = atoms(vec![Vec3::new(3e-6, -2e-6, 0.0); 30]);
        let im = render_fluorescence(&e, &LightSheet::default(), &DetectionModel::default(), 5).unwrap();
        let [x, y] = im.centroid().unwrap();
        assert!((x - 3e-6).abs() < 0.9e-6 && (y + 2e-6).abs() < 0.9e-6);
    }

    #[test]
    fn side_view_histogram() {
        let one = atoms(vec![Vec3::new(1e-6, 2e-6, 3e-6)]);
        let img = render_side_column_density(&one, SideAxis::X, 1e-6).unwrap();
        assert_eq!(img.density.iter().filter(|&&v| v > 0.0).count(), 1);
        assert!((img.atom_count() - 1.0).abs() < 1e-12);

        let column: Vec<Vec3> = (0..50).map(|k| Vec3::new(0.0, 0.2e-6 * (k % 3) as f64, k as f64 * 0.3925e-6)).collect();
        let img = render_side_column_density(&atoms(column), SideAxis::X, 0.5e-6).unwrap();
        let (nz, nh) = img.density.dim();
        assert!(nz > 5 * nh);
        assert!((img.atom_count() - 50.0).abs() < 1e-9);

        assert_eq!(
            render_side_column_density(&AtomEnsemble::empty(rb(), 0), SideAxis::Y, 1e-6),
            Err(ImagingError::EmptyEnsemble)
        );
    }
}
