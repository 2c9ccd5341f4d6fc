//! Dipole potentials, forces and photon scattering rates.
//!
//! A two-level atom in far-detuned light sees `U = ħΩ²/(4δ)` with
//! `Ω² = Γ²I/(2I_sat)`. Red detuning (`δ < 0`) attracts atoms to bright
//! regions.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::{BOLTZMANN, HBAR, MICRO, SPEED_OF_LIGHT};
use crate::optics::{IntensityField2D, IntensityField3D};
use crate::Vec3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PotentialError {
    #[error("detuning is zero; the dipole potential is singular")]
    SingularDetuning,
    #[error("position ({x:.3e}, {y:.3e}, {z:.3e}) m is outside the potential grid")]
    OutOfDomain { x: f64, y: f64, z: f64 },
    #[error("invalid potential: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomSpecies {
    pub name: String,
    /// kg
    pub mass: f64,
    /// m
    pub transition_wavelength: f64,
    /// Natural linewidth Γ, rad/s.
    pub linewidth: f64,
    /// W/m²
    pub saturation_intensity: f64,
}

impl AtomSpecies {
    /// ⁸⁷Rb on the D2 cycling transition.
    pub fn rubidium87() -> Self {
        Self {
            name: "Rb87".into(),
            mass: 1.443_160_6e-25,
            transition_wavelength: 780.241e-9,
            linewidth: 2.0 * PI * 6.0666e6,
            saturation_intensity: 16.69,
        }
    }

    pub fn validate(&self) -> Result<(), PotentialError> {
        if [self.mass, self.transition_wavelength, self.linewidth, self.saturation_intensity]
            .iter()
            .all(|v| *v > 0.0 && v.is_finite())
        {
            Ok(())
        } else {
            Err(PotentialError::Invalid("species constants must be positive".into()))
        }
    }

    /// Photon recoil velocity `ħk/m` at `wavelength`, m/s.
    pub fn recoil_velocity(&self, wavelength: f64) -> f64 {
        HBAR * 2.0 * PI / wavelength / self.mass
    }
}

impl Default for AtomSpecies {
    fn default() -> Self {
        Self::rubidium87()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrapParameters {
    /// m
    pub laser_wavelength: f64,
    /// `ω_laser − ω_transition`, rad/s. Negative for red detuning.
    pub detuning: f64,
}

impl TrapParameters {
    pub fn from_wavelengths(laser_wavelength: f64, transition_wavelength: f64) -> Self {
        Self {
            laser_wavelength,
            detuning: 2.0 * PI * SPEED_OF_LIGHT * (1.0 / laser_wavelength - 1.0 / transition_wavelength),
        }
    }

    /// 785 nm light on the Rb D2 line.
    pub fn default_for(species: &AtomSpecies) -> Self {
        Self::from_wavelengths(785e-9, species.transition_wavelength)
    }
}

/// `Ω² = Γ²·I/(2·I_sat)`, rad²/s².
pub fn rabi_squared(intensity: f64, species: &AtomSpecies) -> f64 {
    species.linewidth * species.linewidth * intensity / (2.0 * species.saturation_intensity)
}

/// Potential energy `ħΩ²/(4δ)` at one intensity, J.
pub fn dipole_energy(intensity: f64, species: &AtomSpecies, params: &TrapParameters) -> Result<f64, PotentialError> {
    if params.detuning == 0.0 {
        return Err(PotentialError::SingularDetuning);
    }
    Ok(HBAR * rabi_squared(intensity, species) / (4.0 * params.detuning))
}

/// Depth `|U|` reached at `peak_intensity`, J.
pub fn trap_depth(peak_intensity: f64, species: &AtomSpecies, params: &TrapParameters) -> Result<f64, PotentialError> {
    Ok(dipole_energy(peak_intensity, species, params)?.abs())
}

/// Photon scattering rate `(Γ/2)·s/(1 + s + (2δ/Γ)²)`, 1/s.
pub fn scattering_rate(intensity: f64, detuning: f64, species: &AtomSpecies) -> f64 {
    let s = intensity / species.saturation_intensity;
    let d = 2.0 * detuning / species.linewidth;
    0.5 * species.linewidth * s / (1.0 + s + d * d)
}

/// A conservative potential sampled by the integrator.
pub trait Potential: Send + Sync + fmt::Debug {
    /// Potential energy, J.
    fn energy(&self, p: &Vec3) -> Result<f64, PotentialError>;

    /// `−∇U`, N.
    fn force(&self, p: &Vec3) -> Result<Vec3, PotentialError>;

    /// Axes along which the potential confines; only motion along these
    /// counts towards the binding energy.
    fn confined_axes(&self) -> [bool; 3] {
        [true, true, false]
    }

    /// Energy above which an atom is free, J.
    fn escape_level(&self) -> f64 {
        0.0
    }

    /// Upper bound on small-oscillation angular frequency for `mass`, rad/s.
    fn max_angular_frequency(&self, mass: f64) -> f64;
}

pub type SharedPotential = Arc<dyn Potential>;

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPotential;

impl Potential for ZeroPotential {
    fn energy(&self, _: &Vec3) -> Result<f64, PotentialError> {
        Ok(0.0)
    }

    fn force(&self, _: &Vec3) -> Result<Vec3, PotentialError> {
        Ok(Vec3::zeros())
    }

    fn confined_axes(&self) -> [bool; 3] {
        [false; 3]
    }

    fn max_angular_frequency(&self, _: f64) -> f64 {
        0.0
    }
}

/// Analytic well `U = −U₀·(1 − (u/w_along)² − (v/w_across)²)` in the plane,
/// uniform along z. `u` runs along the axis at `angle` from +x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarmonicWell {
    /// m
    pub center: [f64; 2],
    /// m
    pub half_width_along: f64,
    /// m
    pub half_width_across: f64,
    /// rad
    pub angle: f64,
    /// U₀ > 0, J.
    pub depth: f64,
    /// Clamp the energy at zero outside the boundary ellipse.
    pub clamped: bool,
}

impl HarmonicWell {
    pub fn round(center: [f64; 2], waist: f64, depth: f64) -> Self {
        Self {
            center,
            half_width_along: waist,
            half_width_across: waist,
            angle: 0.0,
            depth,
            clamped: true,
        }
    }

    fn local(&self, p: &Vec3) -> (f64, f64, f64, f64) {
        let (dx, dy) = (p.x - self.center[0], p.y - self.center[1]);
        let (s, c) = self.angle.sin_cos();
        (dx * c + dy * s, -dx * s + dy * c, c, s)
    }

    fn shape(&self, u: f64, v: f64) -> f64 {
        1.0 - (u / self.half_width_along).powi(2) - (v / self.half_width_across).powi(2)
    }
}

impl Potential for HarmonicWell {
    fn energy(&self, p: &Vec3) -> Result<f64, PotentialError> {
        let (u, v, _, _) = self.local(p);
        let q = self.shape(u, v);
        Ok(-self.depth * if self.clamped { q.max(0.0) } else { q })
    }

    fn force(&self, p: &Vec3) -> Result<Vec3, PotentialError> {
        let (u, v, c, s) = self.local(p);
        if self.clamped && self.shape(u, v) <= 0.0 {
            return Ok(Vec3::zeros());
        }
        let fu = -2.0 * self.depth * u / self.half_width_along.powi(2);
        let fv = -2.0 * self.depth * v / self.half_width_across.powi(2);
        Ok(Vec3::new(fu * c - fv * s, fu * s + fv * c, 0.0))
    }

    fn max_angular_frequency(&self, mass: f64) -> f64 {
        let w = self.half_width_along.min(self.half_width_across);
        (2.0 * self.depth / (mass * w * w)).sqrt()
    }
}

/// Multiplies an in-plane potential by an axial standing-wave envelope
/// `(1 + V·cos(2π(z − z₀)/period))/(1 + V)`, so antinodes keep the in-plane
/// depth.
#[derive(Debug, Clone)]
pub struct AxialStandingWave {
    pub inner: SharedPotential,
    pub visibility: f64,
    /// m
    pub period: f64,
    /// Height of an antinode, m.
    pub antinode: f64,
    /// Deepest in-plane energy magnitude, J; bounds the axial curvature.
    pub depth: f64,
}

impl AxialStandingWave {
    fn envelope(&self, z: f64) -> (f64, f64) {
        let q = 2.0 * PI / self.period;
        let n = 1.0 + self.visibility;
        let ph = q * (z - self.antinode);
        ((1.0 + self.visibility * ph.cos()) / n, -self.visibility * q * ph.sin() / n)
    }
}

impl Potential for AxialStandingWave {
    fn energy(&self, p: &Vec3) -> Result<f64, PotentialError> {
        Ok(self.inner.energy(p)? * self.envelope(p.z).0)
    }

    fn force(&self, p: &Vec3) -> Result<Vec3, PotentialError> {
        let (f, df) = self.envelope(p.z);
        let u = self.inner.energy(p)?;
        let mut force = self.inner.force(p)? * f;
        force.z -= u * df;
        Ok(force)
    }

    fn confined_axes(&self) -> [bool; 3] {
        let a = self.inner.confined_axes();
        [a[0], a[1], true]
    }

    fn max_angular_frequency(&self, mass: f64) -> f64 {
        let q = 2.0 * PI / self.period;
        let axial = (self.depth * q * q * self.visibility / (1.0 + self.visibility) / mass).sqrt();
        self.inner.max_angular_frequency(mass).max(axial)
    }
}

/// Sum of several potentials.
#[derive(Debug, Clone, Default)]
pub struct SumPotential {
    pub parts: Vec<SharedPotential>,
}

impl Potential for SumPotential {
    fn energy(&self, p: &Vec3) -> Result<f64, PotentialError> {
        self.parts.iter().map(|q| q.energy(p)).sum()
    }

    fn force(&self, p: &Vec3) -> Result<Vec3, PotentialError> {
        let mut f = Vec3::zeros();
        for q in &self.parts {
            f += q.force(p)?;
        }
        Ok(f)
    }

    fn confined_axes(&self) -> [bool; 3] {
        let mut out = [false; 3];
        for q in &self.parts {
            for (o, a) in out.iter_mut().zip(q.confined_axes()) {
                *o |= a;
            }
        }
        out
    }

    fn max_angular_frequency(&self, mass: f64) -> f64 {
        // Curvatures add; ω² is bounded by the sum of the parts' ω².
        self.parts
            .iter()
            .map(|q| q.max_angular_frequency(mass).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotentialMetadata {
    pub species_mass: f64,
    pub params: TrapParameters,
}

/// Potential energy sampled on the plane, uniform along z. Values and
/// central-difference gradients are interpolated bilinearly.
#[derive(Debug, Clone)]
pub struct PotentialField2D {
    /// J, indexed `[y, x]`.
    pub data: Array2<f64>,
    pub spacing: f64,
    pub origin: [f64; 2],
    pub metadata: Option<PotentialMetadata>,
    grad: [Array2<f64>; 2],
    curvature: f64,
}

impl PotentialField2D {
    pub fn from_energy(data: Array2<f64>, spacing: f64, origin: [f64; 2]) -> Result<Self, PotentialError> {
        let (ny, nx) = data.dim();
        if ny < 2 || nx < 2 || !(spacing > 0.0) {
            return Err(PotentialError::Invalid("grid needs at least 2×2 samples and positive spacing".into()));
        }
        let gx = Array2::from_shape_fn((ny, nx), |(r, c)| central(|i| data[[r, i]], c, nx) / spacing);
        let gy = Array2::from_shape_fn((ny, nx), |(r, c)| central(|i| data[[i, c]], r, ny) / spacing);
        let mut curvature: f64 = 0.0;
        for r in 1..ny - 1 {
            for c in 1..nx - 1 {
                let dxx = data[[r, c + 1]] - 2.0 * data[[r, c]] + data[[r, c - 1]];
                let dyy = data[[r + 1, c]] - 2.0 * data[[r, c]] + data[[r - 1, c]];
                curvature = curvature.max(dxx.max(dyy) / (spacing * spacing));
            }
        }
        Ok(Self {
            data,
            spacing,
            origin,
            metadata: None,
            grad: [gx, gy],
            curvature,
        })
    }

    /// Samples an analytic potential on a grid (useful for tests and
    /// precomputed landscapes).
    pub fn sample<P: Potential + ?Sized>(
        potential: &P,
        shape: (usize, usize),
        spacing: f64,
        origin: [f64; 2],
    ) -> Result<Self, PotentialError> {
        let mut data = Array2::zeros(shape);
        for ((r, c), v) in data.indexed_iter_mut() {
            let p = Vec3::new(origin[0] + c as f64 * spacing, origin[1] + r as f64 * spacing, 0.0);
            *v = potential.energy(&p)?;
        }
        Self::from_energy(data, spacing, origin)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn x_at(&self, col: usize) -> f64 {
        self.origin[0] + col as f64 * self.spacing
    }

    pub fn y_at(&self, row: usize) -> f64 {
        self.origin[1] + row as f64 * self.spacing
    }

    fn cell(&self, p: &Vec3) -> Result<(usize, usize, f64, f64), PotentialError> {
        let (ny, nx) = self.data.dim();
        let fx = (p.x - self.origin[0]) / self.spacing;
        let fy = (p.y - self.origin[1]) / self.spacing;
        if !(fx >= 0.0 && fy >= 0.0 && fx <= (nx - 1) as f64 && fy <= (ny - 1) as f64) {
            return Err(PotentialError::OutOfDomain { x: p.x, y: p.y, z: p.z });
        }
        let c = (fx.floor() as usize).min(nx - 2);
        let r = (fy.floor() as usize).min(ny - 2);
        Ok((r, c, fx - c as f64, fy - r as f64))
    }
}

fn central(f: impl Fn(usize) -> f64, i: usize, n: usize) -> f64 {
    if i == 0 {
        f(1) - f(0)
    } else if i == n - 1 {
        f(n - 1) - f(n - 2)
    } else {
        0.5 * (f(i + 1) - f(i - 1))
    }
}

fn bilinear(a: &Array2<f64>, r: usize, c: usize, tx: f64, ty: f64) -> f64 {
    (1.0 - ty) * ((1.0 - tx) * a[[r, c]] + tx * a[[r, c + 1]]) + ty * ((1.0 - tx) * a[[r + 1, c]] + tx * a[[r + 1, c + 1]])
}

impl Potential for PotentialField2D {
    fn energy(&self, p: &Vec3) -> Result<f64, PotentialError> {
        let (r, c, tx, ty) = self.cell(p)?;
        Ok(bilinear(&self.data, r, c, tx, ty))
    }

    fn force(&self, p: &Vec3) -> Result<Vec3, PotentialError> {
        let (r, c, tx, ty) = self.cell(p)?;
        Ok(Vec3::new(
            -bilinear(&self.grad[0], r, c, tx, ty),
            -bilinear(&self.grad[1], r, c, tx, ty),
            0.0,
        ))
    }

    fn max_angular_frequency(&self, mass: f64) -> f64 {
        (self.curvature.max(0.0) / mass).sqrt()
    }
}

/// Potential energy on a `[z, y, x]` grid with trilinear interpolation.
#[derive(Debug, Clone)]
pub struct PotentialField3D {
    pub data: Array3<f64>,
    pub spacing: f64,
    pub z_step: f64,
    /// `(x, y, z)` of sample `[0, 0, 0]`.
    pub origin: [f64; 3],
    pub metadata: Option<PotentialMetadata>,
    grad: [Array3<f64>; 3],
    curvature: f64,
}

impl PotentialField3D {
    pub fn from_energy(data: Array3<f64>, spacing: f64, z_step: f64, origin: [f64; 3]) -> Result<Self, PotentialError> {
        let (nz, ny, nx) = data.dim();
        if nz < 2 || ny < 2 || nx < 2 || !(spacing > 0.0 && z_step > 0.0) {
            return Err(PotentialError::Invalid("grid needs at least 2 samples per axis".into()));
        }
        let gx = Array3::from_shape_fn((nz, ny, nx), |(k, r, c)| central(|i| data[[k, r, i]], c, nx) / spacing);
        let gy = Array3::from_shape_fn((nz, ny, nx), |(k, r, c)| central(|i| data[[k, i, c]], r, ny) / spacing);
        let gz = Array3::from_shape_fn((nz, ny, nx), |(k, r, c)| central(|i| data[[i, r, c]], k, nz) / z_step);
        let mut curvature: f64 = 0.0;
        for k in 1..nz - 1 {
            for r in 1..ny - 1 {
                for c in 1..nx - 1 {
                    let v = data[[k, r, c]];
                    let dxx = (data[[k, r, c + 1]] - 2.0 * v + data[[k, r, c - 1]]) / (spacing * spacing);
                    let dyy = (data[[k, r + 1, c]] - 2.0 * v + data[[k, r - 1, c]]) / (spacing * spacing);
                    let dzz = (data[[k + 1, r, c]] - 2.0 * v + data[[k - 1, r, c]]) / (z_step * z_step);
                    curvature = curvature.max(dxx).max(dyy).max(dzz);
                }
            }
        }
        Ok(Self {
            data,
            spacing,
            z_step,
            origin,
            metadata: None,
            grad: [gx, gy, gz],
            curvature,
        })
    }

    fn cell(&self, p: &Vec3) -> Result<([usize; 3], [f64; 3]), PotentialError> {
        let (nz, ny, nx) = self.data.dim();
        let f = [
            (p.x - self.origin[0]) / self.spacing,
            (p.y - self.origin[1]) / self.spacing,
            (p.z - self.origin[2]) / self.z_step,
        ];
        let n = [nx, ny, nz];
        let mut idx = [0; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            if !(f[a] >= 0.0 && f[a] <= (n[a] - 1) as f64) {
                return Err(PotentialError::OutOfDomain { x: p.x, y: p.y, z: p.z });
            }
            idx[a] = (f[a].floor() as usize).min(n[a] - 2);
            t[a] = f[a] - idx[a] as f64;
        }
        Ok((idx, t))
    }

    fn trilinear(a: &Array3<f64>, idx: [usize; 3], t: [f64; 3]) -> f64 {
        let [c, r, k] = idx;
        let [tx, ty, tz] = t;
        let mut acc = 0.0;
        for (dk, wz) in [(0, 1.0 - tz), (1, tz)] {
            for (dr, wy) in [(0, 1.0 - ty), (1, ty)] {
                for (dc, wx) in [(0, 1.0 - tx), (1, tx)] {
                    acc += wz * wy * wx * a[[k + dk, r + dr, c + dc]];
                }
            }
        }
        acc
    }
}

impl Potential for PotentialField3D {
    fn energy(&self, p: &Vec3) -> Result<f64, PotentialError> {
        let (i, t) = self.cell(p)?;
        Ok(Self::trilinear(&self.data, i, t))
    }

    fn force(&self, p: &Vec3) -> Result<Vec3, PotentialError> {
        let (i, t) = self.cell(p)?;
        Ok(-Vec3::new(
            Self::trilinear(&self.grad[0], i, t),
            Self::trilinear(&self.grad[1], i, t),
            Self::trilinear(&self.grad[2], i, t),
        ))
    }

    fn confined_axes(&self) -> [bool; 3] {
        [true; 3]
    }

    fn max_angular_frequency(&self, mass: f64) -> f64 {
        (self.curvature.max(0.0) / mass).sqrt()
    }
}

/// Converts an intensity map to potential energy, cell by cell.
pub fn dipole_potential(
    field: &IntensityField2D,
    species: &AtomSpecies,
    params: &TrapParameters,
) -> Result<PotentialField2D, PotentialError> {
    let scale = dipole_energy(1.0, species, params)?;
    let mut out = PotentialField2D::from_energy(field.data.mapv(|i| i * scale), field.spacing, field.origin)?;
    out.metadata = Some(PotentialMetadata {
        species_mass: species.mass,
        params: *params,
    });
    Ok(out)
}

/// Three-dimensional counterpart of [`dipole_potential`]; slices must be
/// evenly spaced.
pub fn dipole_potential_3d(
    field: &IntensityField3D,
    species: &AtomSpecies,
    params: &TrapParameters,
) -> Result<PotentialField3D, PotentialError> {
    let scale = dipole_energy(1.0, species, params)?;
    let z0 = *field
        .z
        .first()
        .ok_or_else(|| PotentialError::Invalid("field has no slices".into()))?;
    let mut out = PotentialField3D::from_energy(
        field.data.mapv(|i| i * scale),
        field.spacing,
        field.z_step(),
        [field.origin[0], field.origin[1], z0],
    )?;
    out.metadata = Some(PotentialMetadata {
        species_mass: species.mass,
        params: *params,
    });
    Ok(out)
}

/// Time-ordered sequence of potentials; each phase holds from its start time
/// until the next phase begins.
#[derive(Debug, Clone)]
pub struct PotentialSchedule {
    phases: Vec<(f64, SharedPotential)>,
}

impl PotentialSchedule {
    pub fn constant(potential: SharedPotential) -> Self {
        Self {
            phases: vec![(0.0, potential)],
        }
    }

    pub fn new(phases: Vec<(f64, SharedPotential)>) -> Result<Self, PotentialError> {
        if phases.is_empty() {
            return Err(PotentialError::Invalid("schedule has no phases".into()));
        }
        if phases.windows(2).any(|w| !(w[1].0 >= w[0].0)) {
            return Err(PotentialError::Invalid("phase start times must be non-decreasing".into()));
        }
        Ok(Self { phases })
    }

    pub fn at(&self, t: f64) -> &SharedPotential {
        // Tolerance keeps phase switches aligned to a time-step grid stable.
        let eps = 1e-12;
        let mut cur = &self.phases[0].1;
        for (start, p) in &self.phases {
            if *start <= t + eps {
                cur = p;
            }
        }
        cur
    }

    pub fn phases(&self) -> &[(f64, SharedPotential)] {
        &self.phases
    }

    pub fn max_angular_frequency(&self, mass: f64) -> f64 {
        self.phases
            .iter()
            .map(|(_, p)| p.max_angular_frequency(mass))
            .fold(0.0, f64::max)
    }
}

/// Converts microkelvin to joules.
pub fn depth_from_microkelvin(t_uk: f64) -> f64 {
    t_uk * MICRO * BOLTZMANN
}
