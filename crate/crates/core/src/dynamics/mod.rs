//! Thermal sampling, classical evolution and ensemble observables.
//!
//! Atoms do not interact, so every atom advances independently. Each atom
//! owns a random stream keyed by its index, which keeps results identical
//! whether atoms are processed serially or in parallel.

mod fit;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, UnitSphere};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::{BOLTZMANN, STANDARD_GRAVITY};
use crate::potential::{AtomSpecies, Potential, PotentialSchedule, SharedPotential};
use crate::Vec3;

pub use fit::{fit_damped_cosine, linear_fit, OscillationFit};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("ensemble is empty")]
    EmptyEnsemble,
    #[error("need at least {needed} alive atoms, found {found}")]
    TooFewAtoms { needed: usize, found: usize },
    #[error("potential has no bound region to sample from")]
    EmptyTrap,
    #[error("no alive atoms inside the region")]
    EmptyRegion,
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("time step {dt:.3e} s exceeds 1/50 of the shortest trap period ({limit:.3e} s)")]
    StepTooLarge { dt: f64, limit: f64 },
    #[error("fit failed: {0}")]
    FitFailure(String),
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
}

/// Positions, velocities and survival flags of a set of atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomEnsemble {
    positions: Vec<Vec3>,
    velocities: Vec<Vec3>,
    alive: Vec<bool>,
    species: AtomSpecies,
    seed: u64,
    /// Number of `evolve` calls so far; decorrelates successive runs.
    epoch: u64,
}

impl AtomEnsemble {
    pub fn empty(species: AtomSpecies, seed: u64) -> Self {
        Self::from_parts(Vec::new(), Vec::new(), species, seed).expect("empty parts are congruent")
    }

    pub fn from_parts(
        positions: Vec<Vec3>,
        velocities: Vec<Vec3>,
        species: AtomSpecies,
        seed: u64,
    ) -> Result<Self, DynamicsError> {
        if positions.len() != velocities.len() {
            return Err(DynamicsError::InvalidConfig(format!(
                "{} positions but {} velocities",
                positions.len(),
                velocities.len()
            )));
        }
        Ok(Self {
            alive: vec![true; positions.len()],
            positions,
            velocities,
            species,
            seed,
            epoch: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn velocities(&self) -> &[Vec3] {
        &self.velocities
    }

    pub fn alive(&self) -> &[bool] {
        &self.alive
    }

    pub fn species(&self) -> &AtomSpecies {
        &self.species
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_alive(&self) -> usize {
        self.alive.iter().filter(|a| **a).count()
    }

    pub fn kill(&mut self, index: usize) {
        self.alive[index] = false;
    }

    pub fn scale_velocities(&mut self, factor: f64) {
        self.velocities.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn translate(&mut self, offset: Vec3) {
        self.positions.iter_mut().for_each(|p| *p += offset);
    }

    /// Iterator over `(position, velocity)` of alive atoms.
    pub fn alive_states(&self) -> impl Iterator<Item = (&Vec3, &Vec3)> {
        self.positions
            .iter()
            .zip(&self.velocities)
            .zip(&self.alive)
            .filter(|(_, a)| **a)
            .map(|(pv, _)| pv)
    }
}

/// Where thermal samples are drawn.
#[derive(Debug, Clone)]
pub enum ThermalDistribution {
    /// Independent Gaussian position spread per axis around `center`.
    GaussianCloud { center: Vec3, sigma: Vec3 },
    /// Boltzmann-weighted positions inside `potential`, truncated to atoms
    /// whose energy along the confined axes is below the escape level.
    /// Proposals are drawn uniformly in the box `center ± half_extent`.
    InTrap {
        potential: SharedPotential,
        center: Vec3,
        half_extent: Vec3,
    },
}

const SAMPLING_STREAM: u64 = u64::MAX;

/// Draws `n` atoms at `temperature` (K).
pub fn sample_thermal(
    n: usize,
    temperature: f64,
    distribution: &ThermalDistribution,
    species: &AtomSpecies,
    seed: u64,
) -> Result<AtomEnsemble, DynamicsError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(DynamicsError::InvalidConfig("temperature must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SAMPLING_STREAM);
    let sv = (BOLTZMANN * temperature / species.mass).sqrt();
    let vel = Normal::new(0.0, sv).expect("positive sigma");
    let draw_v = |rng: &mut ChaCha8Rng| Vec3::new(vel.sample(rng), vel.sample(rng), vel.sample(rng));
    let kt = BOLTZMANN * temperature;

    let mut positions = Vec::with_capacity(n);
    let mut velocities = Vec::with_capacity(n);
    match distribution {
        ThermalDistribution::GaussianCloud { center, sigma } => {
            for _ in 0..n {
                let mut p = *center;
                for a in 0..3 {
                    if sigma[a] > 0.0 {
                        p[a] += sigma[a] * rng.sample::<f64, _>(rand_distr::StandardNormal);
                    }
                }
                positions.push(p);
                velocities.push(draw_v(&mut rng));
            }
        }
        ThermalDistribution::InTrap {
            potential,
            center,
            half_extent,
        } => {
            let axes = potential.confined_axes();
            let floor = scan_minimum(potential.as_ref(), center, half_extent);
            if !(floor < potential.escape_level()) {
                return Err(DynamicsError::EmptyTrap);
            }
            let max_tries = 10_000usize.max(n * 100_000);
            let mut tries = 0;
            while positions.len() < n {
                tries += 1;
                if tries > max_tries {
                    return Err(DynamicsError::EmptyTrap);
                }
                let mut p = *center;
                for a in 0..3 {
                    p[a] += half_extent[a] * (2.0 * rng.gen::<f64>() - 1.0);
                }
                let Ok(u) = potential.energy(&p) else { continue };
                if u >= potential.escape_level() {
                    continue;
                }
                if rng.gen::<f64>() >= (-(u - floor) / kt).min(0.0).exp() {
                    continue;
                }
                let v = draw_v(&mut rng);
                let ke = confined_kinetic(&v, axes, species.mass);
                if u + ke < potential.escape_level() {
                    positions.push(p);
                    velocities.push(v);
                }
            }
        }
    }
    AtomEnsemble::from_parts(positions, velocities, species.clone(), seed)
}

fn scan_minimum(potential: &dyn Potential, center: &Vec3, half: &Vec3) -> f64 {
    let steps = 24;
    let mut best = potential.energy(center).unwrap_or(f64::INFINITY);
    let axis = |a: usize, i: usize| {
        if half[a] > 0.0 {
            center[a] - half[a] + 2.0 * half[a] * i as f64 / steps as f64
        } else {
            center[a]
        }
    };
    let n = |a: usize| if half[a] > 0.0 { steps + 1 } else { 1 };
    for i in 0..n(0) {
        for j in 0..n(1) {
            for k in 0..n(2) {
                if let Ok(u) = potential.energy(&Vec3::new(axis(0, i), axis(1, j), axis(2, k))) {
                    best = best.min(u);
                }
            }
        }
    }
    best
}

fn confined_kinetic(v: &Vec3, axes: [bool; 3], mass: f64) -> f64 {
    (0..3).filter(|&a| axes[a]).map(|a| 0.5 * mass * v[a] * v[a]).sum()
}

/// Photon recoil from a resonant light sheet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoilSource {
    /// Scattering rate inside the sheet, 1/s.
    pub rate: f64,
    /// Wavelength of the scattered light, m.
    pub wavelength: f64,
    /// Height of the sheet centre, m.
    pub sheet_center: f64,
    /// Full sheet thickness, m.
    pub sheet_thickness: f64,
}

#[derive(Debug, Clone)]
pub struct SimulationConfig {
    /// s
    pub dt: f64,
    /// s
    pub duration: f64,
    /// One-body loss lifetime, s. `None` disables loss.
    pub loss_lifetime: Option<f64>,
    /// Uniform acceleration, m/s². `None` disables gravity.
    pub gravity: Option<Vec3>,
    pub recoil: Option<RecoilSource>,
    pub schedule: PotentialSchedule,
    /// Interval between recorded observables, s. Rounded to whole steps.
    pub record_interval: f64,
    /// Times at which to store full phase-space snapshots, s.
    pub snapshot_times: Vec<f64>,
}

impl SimulationConfig {
    pub fn new(schedule: PotentialSchedule, duration: f64) -> Self {
        Self {
            dt: 1e-6,
            duration,
            loss_lifetime: Some(50e-3),
            gravity: Some(Vec3::new(0.0, 0.0, -STANDARD_GRAVITY)),
            recoil: None,
            schedule,
            record_interval: 10e-6,
            snapshot_times: Vec::new(),
        }
    }

    /// Largest step allowed for `mass`: 1/50 of the shortest trap period.
    pub fn max_step(&self, mass: f64) -> f64 {
        let w = self.schedule.max_angular_frequency(mass);
        if w > 0.0 {
            2.0 * PI / w / 50.0
        } else {
            f64::INFINITY
        }
    }

    /// Shrinks `dt` to satisfy the stability precondition.
    pub fn with_auto_step(mut self, mass: f64) -> Self {
        let limit = self.max_step(mass);
        if self.dt > limit {
            self.dt = limit;
        }
        self
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt - 1e-9).ceil().max(0.0) as usize
    }

    pub fn validate(&self, mass: f64) -> Result<(), DynamicsError> {
        let bad = |m: &str| Err(DynamicsError::InvalidConfig(m.to_string()));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("time step must be positive");
        }
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return bad("duration must be non-negative");
        }
        if let Some(t) = self.loss_lifetime {
            if !(t > 0.0) {
                return bad("loss lifetime must be positive");
            }
        }
        if !(self.record_interval > 0.0) {
            return bad("record interval must be positive");
        }
        if let Some(r) = &self.recoil {
            if !(r.rate >= 0.0 && r.wavelength > 0.0 && r.sheet_thickness > 0.0) {
                return bad("recoil source needs a non-negative rate and positive lengths");
            }
        }
        let limit = self.max_step(mass);
        if self.dt > limit * (1.0 + 1e-12) {
            return Err(DynamicsError::StepTooLarge { dt: self.dt, limit });
        }
        Ok(())
    }
}

/// Full phase-space dump at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub alive: Vec<bool>,
}

/// Observables sampled during a run. Undefined values (no alive atoms, or
/// fewer than two for a temperature) are NaN.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub center_of_mass: Vec<Vec3>,
    /// K
    pub temperature: Vec<f64>,
    pub n_alive: Vec<usize>,
    pub snapshots: Vec<Snapshot>,
}

impl TrajectoryRecord {
    fn push(&mut self, t: f64, ens: &AtomEnsemble) {
        self.times.push(t);
        self.center_of_mass
            .push(center_of_mass(ens, &Region::All).unwrap_or(Vec3::new(f64::NAN, f64::NAN, f64::NAN)));
        self.temperature.push(temperature(ens).unwrap_or(f64::NAN));
        self.n_alive.push(ens.n_alive());
    }

    /// Centre-of-mass coordinate along `axis` (0 = x, 1 = y, 2 = z).
    pub fn com_axis(&self, axis: usize) -> Vec<f64> {
        self.center_of_mass.iter().map(|c| c[axis]).collect()
    }
}

struct AtomState<'a> {
    p: &'a mut Vec3,
    v: &'a mut Vec3,
    alive: &'a mut bool,
    rng: &'a mut ChaCha8Rng,
}

/// Integrates the ensemble with velocity Verlet for `config.duration`.
///
/// Atoms leaving the potential's domain are marked lost. Each step an atom
/// is lost with probability `dt/τ`; inside a light sheet it receives
/// Poisson-distributed recoil kicks of `ħk/m` in random directions.
pub fn evolve(ensemble: &mut AtomEnsemble, config: &SimulationConfig) -> Result<TrajectoryRecord, DynamicsError> {
    let mass = ensemble.species.mass;
    config.validate(mass)?;
    let steps = config.steps();
    let dt = if steps > 0 { config.duration / steps as f64 } else { config.dt };
    let record_every = ((config.record_interval / dt).round() as usize).max(1);
    let g = config.gravity.unwrap_or_else(Vec3::zeros);
    let p_loss = config.loss_lifetime.map(|tau| dt / tau).unwrap_or(0.0);
    let recoil = config.recoil.map(|r| (r, ensemble.species.recoil_velocity(r.wavelength)));

    let epoch_seed = ensemble
        .seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(ensemble.epoch.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03));
    ensemble.epoch += 1;
    let mut rngs: Vec<ChaCha8Rng> = (0..ensemble.len())
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(epoch_seed);
            r.set_stream(i as u64);
            r
        })
        .collect();

    let mut snap_times: Vec<(usize, f64)> = config
        .snapshot_times
        .iter()
        .map(|&t| (((t / dt).round().max(0.0) as usize).min(steps), t))
        .collect();
    snap_times.sort_by_key(|s| s.0);

    let mut record = TrajectoryRecord::default();
    record.push(0.0, ensemble);
    let mut snap_idx = 0;
    let take_snapshots = |step: usize, snap_idx: &mut usize, ens: &AtomEnsemble, rec: &mut TrajectoryRecord| {
        while *snap_idx < snap_times.len() && snap_times[*snap_idx].0 == step {
            rec.snapshots.push(Snapshot {
                time: step as f64 * dt,
                positions: ens.positions.clone(),
                velocities: ens.velocities.clone(),
                alive: ens.alive.clone(),
            });
            *snap_idx += 1;
        }
    };
    take_snapshots(0, &mut snap_idx, ensemble, &mut record);

    let mut step = 0;
    while step < steps {
        // Advance to the next record point or snapshot, whichever is first.
        let mut end = ((step / record_every + 1) * record_every).min(steps);
        if let Some(&(s, _)) = snap_times.get(snap_idx) {
            end = end.min(s.max(step + 1));
        }
        let (start, chunk) = (step, end - step);
        let schedule = &config.schedule;
        let AtomEnsemble {
            positions,
            velocities,
            alive,
            ..
        } = ensemble;
        positions
            .par_iter_mut()
            .zip(velocities.par_iter_mut())
            .zip(alive.par_iter_mut())
            .zip(rngs.par_iter_mut())
            .for_each(|(((p, v), alive), rng)| {
                let mut st = AtomState { p, v, alive, rng };
                for s in start..start + chunk {
                    if !*st.alive {
                        break;
                    }
                    advance(&mut st, s, dt, mass, g, p_loss, recoil, schedule);
                }
            });
        step = end;
        if step % record_every == 0 || step == steps {
            record.push(step as f64 * dt, ensemble);
        }
        take_snapshots(step, &mut snap_idx, ensemble, &mut record);
    }
    Ok(record)
}

#[allow(clippy::too_many_arguments)]
fn advance(
    st: &mut AtomState,
    step: usize,
    dt: f64,
    mass: f64,
    g: Vec3,
    p_loss: f64,
    recoil: Option<(RecoilSource, f64)>,
    schedule: &PotentialSchedule,
) {
    let t0 = step as f64 * dt;
    let t1 = t0 + dt;
    let Ok(f0) = schedule.at(t0).force(st.p) else {
        *st.alive = false;
        return;
    };
    *st.v += (f0 / mass + g) * (0.5 * dt);
    *st.p += *st.v * dt;
    let Ok(f1) = schedule.at(t1).force(st.p) else {
        *st.alive = false;
        return;
    };
    *st.v += (f1 / mass + g) * (0.5 * dt);

    if let Some((r, vr)) = recoil {
        if (st.p.z - r.sheet_center).abs() < 0.5 * r.sheet_thickness && r.rate > 0.0 {
            let mean = r.rate * dt;
            let kicks = Poisson::new(mean).map(|d| d.sample(st.rng) as u64).unwrap_or(0);
            for _ in 0..kicks {
                let d: [f64; 3] = UnitSphere.sample(st.rng);
                *st.v += Vec3::new(d[0], d[1], d[2]) * vr;
            }
        }
    }
    if p_loss > 0.0 && st.rng.gen::<f64>() < p_loss {
        *st.alive = false;
    }
}

/// Kinetic temperature `m·var(v)/k_B`, averaged over the three axes.
pub fn temperature(ensemble: &AtomEnsemble) -> Result<f64, DynamicsError> {
    temperature_along(ensemble, [true; 3])
}

/// Kinetic temperature averaged over the selected axes.
pub fn temperature_along(ensemble: &AtomEnsemble, axes: [bool; 3]) -> Result<f64, DynamicsError> {
    let n = ensemble.n_alive();
    if n < 2 {
        return Err(DynamicsError::TooFewAtoms { needed: 2, found: n });
    }
    let vs: Vec<&Vec3> = ensemble.alive_states().map(|(_, v)| v).collect();
    let mut total = 0.0;
    let mut count = 0;
    for a in (0..3).filter(|&a| axes[a]) {
        let mean = vs.iter().map(|v| v[a]).sum::<f64>() / n as f64;
        let var = vs.iter().map(|v| (v[a] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        total += var;
        count += 1;
    }
    if count == 0 {
        return Err(DynamicsError::InvalidConfig("no axes selected".into()));
    }
    Ok(ensemble.species.mass * total / count as f64 / BOLTZMANN)
}

/// Spatial selection for observables.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Region {
    #[default]
    All,
    /// Infinite cylinder along z, m.
    Disk { center: [f64; 2], radius: f64 },
    /// Axis-aligned box, m.
    Box { min: [f64; 3], max: [f64; 3] },
}

impl Region {
    pub fn contains(&self, p: &Vec3) -> bool {
        match self {
            Region::All => true,
            Region::Disk { center, radius } => (p.x - center[0]).hypot(p.y - center[1]) <= *radius,
            Region::Box { min, max } => (0..3).all(|a| p[a] >= min[a] && p[a] <= max[a]),
        }
    }
}

pub fn center_of_mass(ensemble: &AtomEnsemble, region: &Region) -> Result<Vec3, DynamicsError> {
    let mut sum = Vec3::zeros();
    let mut n = 0usize;
    for (p, _) in ensemble.alive_states() {
        if region.contains(p) {
            sum += p;
            n += 1;
        }
    }
    if n == 0 {
        return Err(DynamicsError::EmptyRegion);
    }
    Ok(sum / n as f64)
}

/// Result of a ballistic expansion fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeOfFlightFit {
    /// K
    pub temperature: f64,
    /// Fitted initial rms width, m.
    pub sigma0: f64,
    pub times: Vec<f64>,
    /// Rms transverse width at each expansion time, m.
    pub widths: Vec<f64>,
}

/// Releases the ensemble into free flight and fits
/// `σ²(t) = σ₀² + (k_B·T/m)·t²` to the transverse (x, y) widths.
pub fn time_of_flight_fit(ensemble: &AtomEnsemble, times: &[f64]) -> Result<TimeOfFlightFit, DynamicsError> {
    let n = ensemble.n_alive();
    if n < 2 {
        return Err(DynamicsError::TooFewAtoms { needed: 2, found: n });
    }
    if times.len() < 2 {
        return Err(DynamicsError::DegenerateFit("need at least two expansion times".into()));
    }
    let widths: Vec<f64> = times.iter().map(|&t| expanded_width(ensemble, t)).collect();
    let t2: Vec<f64> = times.iter().map(|t| t * t).collect();
    let s2: Vec<f64> = widths.iter().map(|w| w * w).collect();
    let (a, b) = linear_fit(&t2, &s2)?;
    let temp = (ensemble.species.mass * b / BOLTZMANN).max(0.0);
    Ok(TimeOfFlightFit {
        temperature: temp,
        sigma0: a.max(0.0).sqrt(),
        times: times.to_vec(),
        widths,
    })
}

/// Rms transverse width (mean variance over x and y) after free flight for
/// `t`, m.
pub fn expanded_width(ensemble: &AtomEnsemble, t: f64) -> f64 {
    let pts: Vec<Vec3> = ensemble.alive_states().map(|(p, v)| p + v * t).collect();
    let n = pts.len() as f64;
    let mut var = 0.0;
    for a in 0..2 {
        let mean = pts.iter().map(|p| p[a]).sum::<f64>() / n;
        var += pts.iter().map(|p| (p[a] - mean).powi(2)).sum::<f64>() / (n - 1.0);
    }
    (var / 2.0).sqrt()
}

/// Fits a damped cosine to the centre-of-mass trace along `axis`.
pub fn oscillation_fit(record: &TrajectoryRecord, axis: usize) -> Result<OscillationFit, DynamicsError> {
    let pairs: Vec<(f64, f64)> = record
        .times
        .iter()
        .zip(&record.center_of_mass)
        .filter(|(_, c)| c[axis].is_finite())
        .map(|(t, c)| (*t, c[axis]))
        .collect();
    let (t, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    fit_damped_cosine(&t, &y)
}

/// Fraction of the ensemble that is alive, inside `region` and bound in
/// `potential` (energy along its confined axes below the escape level).
pub fn recapture_fraction(ensemble: &AtomEnsemble, potential: &dyn Potential, region: &Region) -> f64 {
    if ensemble.is_empty() {
        return 0.0;
    }
    let axes = potential.confined_axes();
    let mass = ensemble.species.mass;
    let bound = ensemble
        .alive_states()
        .filter(|(p, v)| {
            region.contains(p)
                && potential
                    .energy(p)
                    .map(|u| u + confined_kinetic(v, axes, mass) < potential.escape_level())
                    .unwrap_or(false)
        })
        .count();
    bound as f64 / ensemble.len() as f64
}
