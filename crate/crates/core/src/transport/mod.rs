//! Release-and-recapture transport planning.
//!
//! An atom held in a round start trap is released into an elongated harmonic
//! channel whose centre is the midpoint of the move. Starting at rest at one
//! turning point, it reaches the opposite turning point after half an
//! oscillation period, where the end trap is switched on.

mod assign;

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::MICRO;
use crate::dynamics::{
    self, evolve, recapture_fraction, sample_thermal, temperature_along, AtomEnsemble, DynamicsError, Region,
    SimulationConfig, ThermalDistribution,
};
use crate::patterns::{
    check_frame_rate, compose, dither, rasterize_primitive, ComposeMode, DeviceGeometry, DitherMethod,
    FrameSequence, MirrorPattern, PatternError, ShapeSpec, TargetIntensityMap,
};
use crate::potential::{AtomSpecies, HarmonicWell, Potential, PotentialSchedule, SharedPotential, SumPotential};
use crate::Vec3;

pub use assign::{hungarian, rearrange_assign, squared_distance, Assignment};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("destination {distance_um:.2} um away exceeds the channel reach of {limit_um:.2} um")]
    Unreachable { distance_um: f64, limit_um: f64 },
    #[error("channels of plans {first} and {second} overlap")]
    Conflict { first: usize, second: usize },
    #[error("plans use different frame rates")]
    FrameRateMismatch,
    #[error("{sources} sources cannot fill {targets} targets")]
    Infeasible { sources: usize, targets: usize },
    #[error("invalid transport request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Pattern(#[from] PatternError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Half oscillation period `π·√(m·w²/(2·U₀))` of a harmonic well of depth
/// `U₀` (J) and half width `w` (m).
pub fn half_period(depth: f64, half_width: f64, species: &AtomSpecies) -> f64 {
    PI * (species.mass * half_width * half_width / (2.0 * depth)).sqrt()
}

/// Geometry and timing inputs for one move. Lengths in m, depth in J.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransportRequest {
    pub start: [f64; 2],
    pub end: [f64; 2],
    pub depth: f64,
    /// Waist of the round start and end traps.
    pub trap_waist: f64,
    /// Channel half width along the move.
    pub channel_half_length: f64,
    /// Channel half width across the move.
    pub channel_half_width: f64,
    /// Hz
    pub frame_rate: f64,
    /// Frames showing the start trap before release.
    pub hold_before_frames: usize,
    /// Frames showing the end trap after recapture.
    pub hold_after_frames: usize,
}

impl TransportRequest {
    /// Request with the 6 µm traps and 6 × 26 µm channel used throughout.
    pub fn new(start: [f64; 2], end: [f64; 2], depth: f64) -> Self {
        Self {
            start,
            end,
            depth,
            trap_waist: 6.0 * MICRO,
            channel_half_length: 26.0 * MICRO,
            channel_half_width: 6.0 * MICRO,
            frame_rate: 20_000.0,
            hold_before_frames: 2,
            hold_after_frames: 2,
        }
    }
}

/// Quantized three-phase schedule realizing one move.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub request: TransportRequest,
    pub start_trap: HarmonicWell,
    pub end_trap: HarmonicWell,
    pub channel: HarmonicWell,
    /// Unquantized half period, s.
    pub half_period: f64,
    /// Frame index at which the channel replaces the start trap.
    pub release_frame: usize,
    /// Frame index at which the end trap replaces the channel.
    pub recapture_frame: usize,
    /// Total frames in the sequence.
    pub total_frames: usize,
    /// Quantized channel duration minus the half period, s.
    pub residual: f64,
    pub warning: Option<String>,
}

impl TransportPlan {
    pub fn frame_period(&self) -> f64 {
        1.0 / self.request.frame_rate
    }

    pub fn release_time(&self) -> f64 {
        self.release_frame as f64 * self.frame_period()
    }

    pub fn recapture_time(&self) -> f64 {
        self.recapture_frame as f64 * self.frame_period()
    }

    pub fn channel_frames(&self) -> usize {
        self.recapture_frame - self.release_frame
    }

    /// Start and end coincide; the atoms are never released.
    pub fn is_degenerate(&self) -> bool {
        self.channel_frames() == 0
    }

    pub fn distance(&self) -> f64 {
        let r = &self.request;
        (r.end[0] - r.start[0]).hypot(r.end[1] - r.start[1])
    }

    /// Phase active during frame `f`.
    pub fn phase_at_frame(&self, f: usize) -> Phase {
        if self.is_degenerate() || f < self.release_frame {
            Phase::Start
        } else if f < self.recapture_frame {
            Phase::Channel
        } else {
            Phase::End
        }
    }

    pub fn phase_well(&self, phase: Phase) -> &HarmonicWell {
        match phase {
            Phase::Start => &self.start_trap,
            Phase::Channel => &self.channel,
            Phase::End => &self.end_trap,
        }
    }

    /// Analytic potential schedule with the end trap switched on at
    /// `recapture` seconds (the planned time when `None`).
    pub fn schedule_with_recapture(&self, recapture: Option<f64>) -> PotentialSchedule {
        let start: SharedPotential = Arc::new(self.start_trap);
        if self.is_degenerate() {
            return PotentialSchedule::constant(start);
        }
        let t_rel = self.release_time();
        let t_rec = recapture.unwrap_or(self.recapture_time()).max(t_rel);
        PotentialSchedule::new(vec![
            (0.0, start),
            (t_rel, Arc::new(self.channel)),
            (t_rec, Arc::new(self.end_trap)),
        ])
        .expect("phases are ordered")
    }

    /// Analytic potential schedule on the frame grid.
    pub fn ideal_schedule(&self) -> PotentialSchedule {
        self.schedule_with_recapture(None)
    }

    /// Shape drawn on the device for a phase.
    pub fn phase_shape(&self, phase: Phase) -> ShapeSpec {
        well_shape(self.phase_well(phase))
    }

    fn phase_maps(&self, geometry: &DeviceGeometry) -> Result<[TargetIntensityMap; 3], TransportError> {
        let m = |p| rasterize_primitive(&self.phase_shape(p), geometry);
        Ok([m(Phase::Start)?, m(Phase::Channel)?, m(Phase::End)?])
    }

    /// Mirror frames for the whole move. Each intensity target is dithered
    /// from its amplitude so the imaged intensity follows the harmonic form.
    pub fn frames(&self, geometry: &DeviceGeometry, method: DitherMethod) -> Result<FrameSequence, TransportError> {
        let maps = self.phase_maps(geometry)?;
        let pats: Vec<Arc<MirrorPattern>> = maps
            .iter()
            .map(|m| Arc::new(dither(&m.amplitude_target(), method)))
            .collect();
        let frames = (0..self.total_frames)
            .map(|f| pats[self.phase_at_frame(f) as usize].clone())
            .collect();
        Ok(FrameSequence::new(frames, self.request.frame_rate)?)
    }

    /// Simulates the move with the analytic schedule.
    pub fn verify(&self, config: &VerifyConfig) -> Result<VerifyReport, TransportError> {
        verify_plans(std::slice::from_ref(self), config).map(|mut v| v.remove(0))
    }
}

/// The three phases of a move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Start = 0,
    Channel = 1,
    End = 2,
}

fn well_shape(w: &HarmonicWell) -> ShapeSpec {
    ShapeSpec::HarmonicChannel {
        center_um: [w.center[0] / MICRO, w.center[1] / MICRO],
        half_width_x_um: w.half_width_across / MICRO,
        half_width_y_um: w.half_width_along / MICRO,
        angle_rad: w.angle,
    }
}

/// Plans one release-and-recapture move.
pub fn plan_release_recapture(
    request: &TransportRequest,
    species: &AtomSpecies,
) -> Result<TransportPlan, TransportError> {
    check_frame_rate(request.frame_rate)?;
    let r = request;
    if !(r.depth > 0.0 && r.trap_waist > 0.0 && r.channel_half_length > 0.0 && r.channel_half_width > 0.0) {
        return Err(TransportError::Invalid("depth and widths must be positive".into()));
    }
    let (dx, dy) = (r.end[0] - r.start[0], r.end[1] - r.start[1]);
    let distance = dx.hypot(dy);
    let limit = 2.0 * r.channel_half_length - r.trap_waist;
    if distance > limit {
        return Err(TransportError::Unreachable {
            distance_um: distance / MICRO,
            limit_um: limit / MICRO,
        });
    }
    let start_trap = HarmonicWell::round(r.start, r.trap_waist, r.depth);
    let end_trap = HarmonicWell::round(r.end, r.trap_waist, r.depth);
    let channel = HarmonicWell {
        center: [0.5 * (r.start[0] + r.end[0]), 0.5 * (r.start[1] + r.end[1])],
        half_width_along: r.channel_half_length,
        half_width_across: r.channel_half_width,
        angle: if distance > 0.0 { dy.atan2(dx) } else { 0.0 },
        depth: r.depth,
        clamped: true,
    };
    let period = 1.0 / r.frame_rate;
    let t_half = half_period(r.depth, r.channel_half_length, species);
    let release_frame = r.hold_before_frames;
    let (channel_frames, residual, t_half_eff) = if distance == 0.0 {
        (0, 0.0, 0.0)
    } else {
        let n = (t_half / period).round().max(1.0) as usize;
        (n, n as f64 * period - t_half, t_half)
    };
    let warning = (t_half_eff > 0.0 && residual.abs() > 0.1 * t_half_eff).then(|| {
        format!(
            "frame quantization changes the channel time by {:.1} us ({:.0}% of the half period)",
            residual * 1e6,
            100.0 * residual.abs() / t_half_eff
        )
    });
    let recapture_frame = release_frame + channel_frames;
    Ok(TransportPlan {
        request: *request,
        start_trap,
        end_trap,
        channel,
        half_period: t_half,
        release_frame,
        recapture_frame,
        total_frames: recapture_frame + r.hold_after_frames.max(1),
        residual,
        warning,
    })
}

/// Moves executed together, with releases aligned to the same frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelPlan {
    pub plans: Vec<TransportPlan>,
    pub release_frame: usize,
    pub total_frames: usize,
    pub frame_rate: f64,
}

impl ParallelPlan {
    /// Per-frame composite of every plan's phase map.
    pub fn frames(&self, geometry: &DeviceGeometry, method: DitherMethod) -> Result<FrameSequence, TransportError> {
        let maps: Vec<[TargetIntensityMap; 3]> =
            self.plans.iter().map(|p| p.phase_maps(geometry)).collect::<Result<_, _>>()?;
        let mut cache: Vec<(Vec<usize>, Arc<MirrorPattern>)> = Vec::new();
        let mut frames = Vec::with_capacity(self.total_frames);
        for f in 0..self.total_frames {
            let key: Vec<usize> = self.plans.iter().map(|p| p.phase_at_frame(f) as usize).collect();
            if let Some((_, pat)) = cache.iter().find(|(k, _)| *k == key) {
                frames.push(pat.clone());
                continue;
            }
            let parts: Vec<&TargetIntensityMap> = maps.iter().zip(&key).map(|(m, &k)| &m[k]).collect();
            let map = compose(&parts, ComposeMode::Max)?;
            let pat = Arc::new(dither(&map.amplitude_target(), method));
            cache.push((key, pat.clone()));
            frames.push(pat);
        }
        Ok(FrameSequence::new(frames, self.frame_rate)?)
    }

    /// Analytic schedule summing every plan's active well.
    pub fn ideal_schedule(&self) -> PotentialSchedule {
        combined_schedule(&self.plans)
    }

    pub fn verify(&self, config: &VerifyConfig) -> Result<Vec<VerifyReport>, TransportError> {
        verify_plans(&self.plans, config)
    }
}

fn combined_schedule(plans: &[TransportPlan]) -> PotentialSchedule {
    if plans.len() == 1 {
        return plans[0].ideal_schedule();
    }
    let mut switches = BTreeSet::new();
    switches.insert(0usize);
    for p in plans {
        switches.insert(p.release_frame);
        switches.insert(p.recapture_frame);
    }
    let period = 1.0 / plans[0].request.frame_rate;
    let phases = switches
        .into_iter()
        .map(|f| {
            let parts: Vec<SharedPotential> = plans
                .iter()
                .map(|p| Arc::new(*p.phase_well(p.phase_at_frame(f))) as SharedPotential)
                .collect();
            (f as f64 * period, Arc::new(SumPotential { parts }) as SharedPotential)
        })
        .collect();
    PotentialSchedule::new(phases).expect("switch times are sorted")
}

/// 4 × 4 mirror blocks touched by any of a plan's three phase maps.
fn block_footprint(plan: &TransportPlan, geometry: &DeviceGeometry) -> Result<BTreeSet<(usize, usize)>, TransportError> {
    let mut out = BTreeSet::new();
    for m in plan.phase_maps(geometry)? {
        for ((r, c), &v) in m.grid().indexed_iter() {
            if v > 0.0 {
                out.insert((r / 4, c / 4));
            }
        }
    }
    Ok(out)
}

/// Combines independent moves into one batch. Footprints are compared at
/// the 4 × 4 block granularity of the ordered dither, so each move's mirrors
/// are unaffected by the others.
pub fn plan_parallel(plans: &[TransportPlan], geometry: &DeviceGeometry) -> Result<ParallelPlan, TransportError> {
    let first = plans
        .first()
        .ok_or_else(|| TransportError::Invalid("no plans to combine".into()))?;
    let rate = first.request.frame_rate;
    if plans.iter().any(|p| p.request.frame_rate != rate) {
        return Err(TransportError::FrameRateMismatch);
    }
    let prints: Vec<_> = plans
        .iter()
        .map(|p| block_footprint(p, geometry))
        .collect::<Result<_, _>>()?;
    for i in 0..plans.len() {
        for j in i + 1..plans.len() {
            if !prints[i].is_disjoint(&prints[j]) {
                return Err(TransportError::Conflict { first: i, second: j });
            }
        }
    }
    let release = plans.iter().map(|p| p.release_frame).max().unwrap_or(0);
    let aligned: Vec<TransportPlan> = plans
        .iter()
        .map(|p| {
            let shift = release - p.release_frame;
            TransportPlan {
                release_frame: p.release_frame + shift,
                recapture_frame: p.recapture_frame + shift,
                total_frames: p.total_frames + shift,
                ..p.clone()
            }
        })
        .collect();
    let total = aligned.iter().map(|p| p.total_frames).max().unwrap_or(0);
    let aligned = aligned
        .into_iter()
        .map(|p| TransportPlan {
            total_frames: total,
            ..p
        })
        .collect();
    Ok(ParallelPlan {
        plans: aligned,
        release_frame: release,
        total_frames: total,
        frame_rate: rate,
    })
}

/// Assignment plus conflict-free batches of simultaneous moves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RearrangementPlan {
    pub assignment: Assignment,
    pub batches: Vec<ParallelPlan>,
    pub total_cost: f64,
}

/// Assigns atoms to targets and groups the resulting moves into batches
/// whose channels do not overlap. Sites are in m; `template` supplies depth,
/// widths and frame rate.
pub fn plan_rearrangement(
    sources: &[[f64; 2]],
    targets: &[[f64; 2]],
    template: &TransportRequest,
    species: &AtomSpecies,
    geometry: &DeviceGeometry,
) -> Result<RearrangementPlan, TransportError> {
    let assignment = rearrange_assign(sources, targets)?;
    let mut batches: Vec<Vec<TransportPlan>> = Vec::new();
    for &(s, t) in &assignment.pairs {
        if sources[s] == targets[t] {
            continue;
        }
        let req = TransportRequest {
            start: sources[s],
            end: targets[t],
            ..*template
        };
        let plan = plan_release_recapture(&req, species)?;
        let mut placed = false;
        for batch in batches.iter_mut() {
            let mut trial = batch.clone();
            trial.push(plan.clone());
            match plan_parallel(&trial, geometry) {
                Ok(_) => {
                    batch.push(plan.clone());
                    placed = true;
                    break;
                }
                Err(TransportError::Conflict { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        if !placed {
            batches.push(vec![plan]);
        }
    }
    let batches = batches
        .iter()
        .map(|b| plan_parallel(b, geometry))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RearrangementPlan {
        total_cost: assignment.total_cost,
        assignment,
        batches,
    })
}

/// Settings for simulating a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub atoms: usize,
    /// K
    pub temperature: f64,
    pub seed: u64,
    /// s
    pub dt: f64,
    /// s; `None` disables loss.
    pub loss_lifetime: Option<f64>,
    pub gravity: bool,
    /// Time spent in the end trap after recapture before measuring, s.
    pub hold_after: f64,
    /// Samples for the time-averaged temperature during the hold.
    pub temperature_samples: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            atoms: 1000,
            temperature: 90e-6,
            seed: 1,
            dt: 1e-6,
            loss_lifetime: Some(50e-3),
            gravity: true,
            hold_after: 1e-3,
            temperature_samples: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    /// Fraction of the sampled atoms bound in the end trap at recapture.
    pub recapture_fraction: f64,
    /// In-plane kinetic temperature before release, K.
    pub initial_temperature: f64,
    /// Time-averaged in-plane kinetic temperature of the recaptured atoms
    /// during the hold, K.
    pub final_temperature: f64,
    pub delta_temperature: f64,
    /// Centre of mass of recaptured atoms at recapture, m.
    pub arrival: Option<[f64; 2]>,
}

fn base_sim(schedule: PotentialSchedule, duration: f64, cfg: &VerifyConfig, mass: f64) -> SimulationConfig {
    let mut sim = SimulationConfig::new(schedule, duration);
    sim.dt = cfg.dt;
    sim.loss_lifetime = cfg.loss_lifetime;
    if !cfg.gravity {
        sim.gravity = None;
    }
    sim.with_auto_step(mass)
}

fn sample_in(well: &HarmonicWell, cfg: &VerifyConfig, species: &AtomSpecies, seed: u64) -> Result<AtomEnsemble, TransportError> {
    let w = well.half_width_along.max(well.half_width_across);
    let dist = ThermalDistribution::InTrap {
        potential: Arc::new(*well),
        center: Vec3::new(well.center[0], well.center[1], 0.0),
        half_extent: Vec3::new(w, w, 0.0),
    };
    Ok(sample_thermal(cfg.atoms, cfg.temperature, &dist, species, seed)?)
}

fn end_region(plan: &TransportPlan) -> Region {
    Region::Disk {
        center: plan.end_trap.center,
        radius: plan.request.trap_waist,
    }
}

/// Simulates every plan under the combined schedule; one ensemble per plan.
pub fn verify_plans(plans: &[TransportPlan], cfg: &VerifyConfig) -> Result<Vec<VerifyReport>, TransportError> {
    let species = AtomSpecies::rubidium87();
    let schedule = combined_schedule(plans);
    let mut out = Vec::with_capacity(plans.len());
    for (i, plan) in plans.iter().enumerate() {
        let mut ens = sample_in(&plan.start_trap, cfg, &species, cfg.seed.wrapping_add(i as u64))?;
        let t0 = temperature_along(&ens, [true, true, false])?;
        let t_rec = plan.recapture_time();
        let hold = cfg.hold_after.max(0.0);
        let mut sim = base_sim(schedule.clone(), t_rec + hold, cfg, species.mass);
        let n_t = cfg.temperature_samples.max(1);
        sim.snapshot_times = std::iter::once(t_rec)
            .chain((1..=n_t).map(|k| t_rec + hold * k as f64 / n_t as f64))
            .collect();
        sim.record_interval = sim.duration.max(sim.dt);
        let rec = evolve(&mut ens, &sim)?;

        let end: &dyn Potential = &plan.end_trap;
        let region = end_region(plan);
        let at_rec = snapshot_ensemble(&ens, &rec.snapshots[0]);
        let fraction = recapture_fraction(&at_rec, end, &region);
        let arrival = recaptured(&at_rec, end, &region)
            .and_then(|e| dynamics::center_of_mass(&e, &Region::All).ok())
            .map(|c| [c.x, c.y]);
        let temps: Vec<f64> = rec.snapshots[1..]
            .iter()
            .filter_map(|s| recaptured(&snapshot_ensemble(&ens, s), end, &region))
            .filter_map(|e| temperature_along(&e, [true, true, false]).ok())
            .collect();
        let t1 = if temps.is_empty() {
            f64::NAN
        } else {
            temps.iter().sum::<f64>() / temps.len() as f64
        };
        out.push(VerifyReport {
            recapture_fraction: fraction,
            initial_temperature: t0,
            final_temperature: t1,
            delta_temperature: t1 - t0,
            arrival,
        });
    }
    Ok(out)
}

fn snapshot_ensemble(template: &AtomEnsemble, s: &dynamics::Snapshot) -> AtomEnsemble {
    let mut e = AtomEnsemble::from_parts(s.positions.clone(), s.velocities.clone(), template.species().clone(), template.seed())
        .expect("snapshot arrays are congruent");
    for (i, a) in s.alive.iter().enumerate() {
        if !a {
            e.kill(i);
        }
    }
    e
}

/// Sub-ensemble of atoms bound inside `region`; `None` when empty.
fn recaptured(e: &AtomEnsemble, well: &dyn Potential, region: &Region) -> Option<AtomEnsemble> {
    let axes = well.confined_axes();
    let m = e.species().mass;
    let (p, v): (Vec<Vec3>, Vec<Vec3>) = e
        .alive_states()
        .filter(|(p, v)| {
            let ke: f64 = (0..3).filter(|&a| axes[a]).map(|a| 0.5 * m * v[a] * v[a]).sum();
            region.contains(p) && well.energy(p).map(|u| u + ke < well.escape_level()).unwrap_or(false)
        })
        .map(|(p, v)| (*p, *v))
        .unzip();
    if p.is_empty() {
        return None;
    }
    AtomEnsemble::from_parts(p, v, e.species().clone(), e.seed()).ok()
}

/// Recapture fraction when the end trap is switched on at each of `times`
/// (s after the start of the sequence) instead of the planned frame.
pub fn recapture_scan(plan: &TransportPlan, times: &[f64], cfg: &VerifyConfig) -> Result<Vec<f64>, TransportError> {
    let species = AtomSpecies::rubidium87();
    let mut ens = sample_in(&plan.start_trap, cfg, &species, cfg.seed)?;
    // Keep the channel on throughout; the end trap is evaluated on the
    // snapshot taken at each candidate switch time.
    let schedule = plan.schedule_with_recapture(Some(f64::INFINITY));
    let t_max = times.iter().cloned().fold(0.0, f64::max);
    let mut sim = base_sim(schedule, t_max, cfg, species.mass);
    sim.snapshot_times = times.to_vec();
    sim.record_interval = t_max.max(sim.dt);
    let rec = evolve(&mut ens, &sim)?;
    let region = end_region(plan);
    // Snapshots are stored sorted by time; map back to the request order.
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut out = vec![0.0; times.len()];
    for (snap, &idx) in rec.snapshots.iter().zip(&order) {
        out[idx] = recapture_fraction(&snapshot_ensemble(&ens, snap), &plan.end_trap, &region);
    }
    Ok(out)
}

/// Ideal arrival point of a single atom starting at rest at the start
/// position in the unclamped channel, evolved for the half period.
pub fn ideal_arrival(plan: &TransportPlan) -> Result<[f64; 2], TransportError> {
    let species = AtomSpecies::rubidium87();
    let channel = HarmonicWell {
        clamped: false,
        ..plan.channel
    };
    let s = plan.request.start;
    let mut ens = AtomEnsemble::from_parts(vec![Vec3::new(s[0], s[1], 0.0)], vec![Vec3::zeros()], species.clone(), 0)?;
    let mut sim = SimulationConfig::new(PotentialSchedule::constant(Arc::new(channel)), plan.half_period);
    sim.loss_lifetime = None;
    sim.gravity = None;
    let sim = sim.with_auto_step(species.mass);
    evolve(&mut ens, &sim)?;
    let p = ens.positions()[0];
    Ok([p.x, p.y])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::depth_from_microkelvin;

    fn rb() -> AtomSpecies {
        AtomSpecies::rubidium87()
    }

    fn um(x: f64, y: f64) -> [f64; 2] {
        [x * MICRO, y * MICRO]
    }

    #[test]
    fn half_period_values() {
        let u0 = depth_from_microkelvin(100.0);
        let t26 = half_period(u0, 26e-6, &rb());
        let t6 = half_period(u0, 6e-6, &rb());
        assert!((t26 * 1e6 - 590.0).abs() < 1.5, "{}", t26 * 1e6);
        assert!((t6 * 1e6 - 136.0).abs() < 0.5, "{}", t6 * 1e6);
        assert!((half_period(4.0 * u0, 26e-6, &rb()) / t26 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn eight_micron_move_quantization() {
        let u0 = depth_from_microkelvin(100.0);
        let plan = plan_release_recapture(&TransportRequest::new(um(-4.0, 0.0), um(4.0, 0.0), u0), &rb()).unwrap();
        assert_eq!(plan.channel_frames(), 12);
        assert!((plan.residual * 1e6 - 10.0).abs() < 1.0, "{}", plan.residual);
        assert!(plan.warning.is_none());
        assert_eq!(plan.channel.center, [0.0, 0.0]);
        assert!((plan.recapture_time() - plan.release_time() - 600e-6).abs() < 1e-12);
    }

    #[test]
    fn degenerate_and_unreachable() {
        let u0 = depth_from_microkelvin(100.0);
        let p = plan_release_recapture(&TransportRequest::new(um(1.0, 1.0), um(1.0, 1.0), u0), &rb()).unwrap();
        assert!(p.is_degenerate());
        assert!((0..p.total_frames).all(|f| p.phase_at_frame(f) == Phase::Start));
        let err = plan_release_recapture(&TransportRequest::new(um(-30.0, 0.0), um(30.0, 0.0), u0), &rb()).unwrap_err();
        assert!(matches!(err, TransportError::Unreachable { .. }));
    }

    #[test]
    fn coarse_frame_rate_warns() {
        let u0 = depth_from_microkelvin(100.0);
        let mut req = TransportRequest::new(um(-4.0, 0.0), um(4.0, 0.0), u0);
        req.channel_half_length = 7.0e-6;
        req.trap_waist = 2.0e-6;
        req.frame_rate = 4_000.0;
        let p = plan_release_recapture(&req, &rb()).unwrap();
        assert!(p.warning.is_some());
        req.frame_rate = 30_000.0;
        assert!(matches!(
            plan_release_recapture(&req, &rb()),
            Err(TransportError::Pattern(PatternError::FrameRate(_)))
        ));
    }

    #[test]
    fn ideal_arrival_at_far_turning_point() {
        let u0 = depth_from_microkelvin(100.0);
        let plan = plan_release_recapture(&TransportRequest::new(um(0.0, -4.0), um(0.0, 4.0), u0), &rb()).unwrap();
        let a = ideal_arrival(&plan).unwrap();
        let err = (a[0] - plan.request.end[0]).hypot(a[1] - plan.request.end[1]);
        assert!(err < 0.02 * plan.distance(), "{err}");
    }

    #[test]
    fn overlapping_plans_conflict() {
        let u0 = depth_from_microkelvin(100.0);
        let g = DeviceGeometry::default();
        let a = plan_release_recapture(&TransportRequest::new(um(-4.0, 0.0), um(4.0, 0.0), u0), &rb()).unwrap();
        let b = plan_release_recapture(&TransportRequest::new(um(4.0, 3.0), um(-4.0, 3.0), u0), &rb()).unwrap();
        assert_eq!(
            plan_parallel(&[a.clone(), b], &g),
            Err(TransportError::Conflict { first: 0, second: 1 })
        );
        let single = plan_parallel(std::slice::from_ref(&a), &g).unwrap();
        assert_eq!(single.plans[0], a);
    }

    #[test]
    fn parallel_alignment() {
        let u0 = depth_from_microkelvin(100.0);
        let g = DeviceGeometry::default();
        let a = plan_release_recapture(&TransportRequest::new(um(-4.0, -15.0), um(4.0, -15.0), u0), &rb()).unwrap();
        let mut rb_req = TransportRequest::new(um(4.5, 15.0), um(-4.5, 15.0), u0);
        rb_req.hold_before_frames = 5;
        rb_req.channel_half_length = 20e-6;
        let b = plan_release_recapture(&rb_req, &rb()).unwrap();
        let par = plan_parallel(&[a, b], &g).unwrap();
        assert_eq!(par.plans[0].release_frame, 5);
        assert_eq!(par.plans[1].release_frame, 5);
        assert_ne!(par.plans[0].recapture_frame, par.plans[1].recapture_frame);
        assert!(par.plans.iter().all(|p| p.total_frames == par.total_frames));
    }
}
