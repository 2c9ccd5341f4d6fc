//! Stage execution and the run report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use tweezer_core::constants::{joules_to_microkelvin, MICRO, NANO};
use tweezer_core::dynamics::{
    evolve, fit_damped_cosine, sample_thermal, temperature_along, time_of_flight_fit, AtomEnsemble, RecoilSource,
    SimulationConfig, Snapshot, ThermalDistribution,
};
use tweezer_core::imaging::{photon_budget, render_fluorescence, FluorescenceImage};
use tweezer_core::io::{self, PlanRecord};
use tweezer_core::optics::{
    axial_standing_wave_window, fringe_period, image_plane_field, visibility, ComplexField2D, IntensityField2D,
    IntensityField3D, MirrorWindow, PixelWindow,
};
use tweezer_core::patterns::{dither, rasterize_primitive, MirrorPattern, ShapeSpec};
use tweezer_core::potential::{
    dipole_potential, trap_depth, AxialStandingWave, PotentialField2D, PotentialSchedule, SharedPotential,
    TrapParameters,
};
use tweezer_core::transport::{plan_parallel, plan_rearrangement, plan_release_recapture, recapture_scan};
use tweezer_core::Vec3;

use crate::error::{ScenarioError, StageError};
use crate::scenario::{Axial, Loading, Scenario, Stage};

pub const REPORT_FILE: &str = "report.json";

type Metrics = BTreeMap<String, Value>;

/// Command-line overrides of scenario fields.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    /// Empty runs the scenario's own stage list.
    pub stages: Vec<Stage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub stage: Stage,
    pub status: StageStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<StageError>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ManifestEntry {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub scenario: String,
    pub seed: u64,
    pub status: StageStatus,
    pub exit_code: i32,
    pub stages: Vec<StageReport>,
    pub metrics: BTreeMap<String, Metrics>,
    /// Every file written by the run except the report itself.
    pub manifest: Vec<ManifestEntry>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub report: Report,
    pub report_path: PathBuf,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        self.report.exit_code
    }
}

/// Runs the requested stages and writes artifacts plus `report.json` into
/// the output directory. Stage failures are recorded in the report; only
/// problems that prevent a report from being written are returned as errors.
pub fn run_scenario(scenario: &Scenario, options: &RunOptions) -> Result<RunOutcome, ScenarioError> {
    let stages = scenario.resolve_stages(&options.stages)?;
    let seed = options.seed.unwrap_or(scenario.seed);
    let out = options
        .output_dir
        .clone()
        .or_else(|| scenario.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(&scenario.name));
    fs::create_dir_all(&out).map_err(|source| ScenarioError::Write {
        path: out.display().to_string(),
        source,
    })?;

    let mut runner = Runner::new(scenario, seed, out.clone());
    let mut reports = Vec::with_capacity(stages.len());
    let mut metrics = BTreeMap::new();
    let mut exit_code = 0;
    for &stage in &stages {
        let blocked = stage.requires().and_then(|dep| {
            reports
                .iter()
                .find(|r: &&StageReport| r.stage == dep && r.status != StageStatus::Ok)
                .map(|_| dep)
        });
        if let Some(dep) = blocked {
            reports.push(StageReport {
                stage,
                status: StageStatus::Skipped,
                error: None,
                reason: Some(format!("stage '{dep}' did not complete")),
            });
            continue;
        }
        match runner.run(stage) {
            Ok(m) => {
                metrics.insert(stage.name().to_string(), m);
                reports.push(StageReport {
                    stage,
                    status: StageStatus::Ok,
                    error: None,
                    reason: None,
                });
            }
            Err(e) => {
                if exit_code == 0 {
                    exit_code = e.kind.exit_code();
                }
                reports.push(StageReport {
                    stage,
                    status: StageStatus::Failed,
                    error: Some(e),
                    reason: None,
                });
            }
        }
    }

    let manifest = build_manifest(&out, &runner.files).map_err(|source| ScenarioError::Write {
        path: out.display().to_string(),
        source,
    })?;
    let report = Report {
        scenario: scenario.name.clone(),
        seed,
        status: if exit_code == 0 {
            StageStatus::Ok
        } else {
            StageStatus::Failed
        },
        exit_code,
        stages: reports,
        metrics,
        manifest,
    };
    let report_path = out.join(REPORT_FILE);
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    fs::write(&report_path, text).map_err(|source| ScenarioError::Write {
        path: report_path.display().to_string(),
        source,
    })?;
    Ok(RunOutcome { report, report_path })
}

fn build_manifest(root: &Path, files: &[PathBuf]) -> std::io::Result<Vec<ManifestEntry>> {
    let mut entries = Vec::with_capacity(files.len());
    for f in files {
        let bytes = fs::read(f)?;
        let rel = f.strip_prefix(root).unwrap_or(f);
        let path = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        entries.push(ManifestEntry {
            path,
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    entries.dedup_by(|a, b| a.path == b.path);
    Ok(entries)
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for an independent random stream derived from `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix(seed ^ mix(stream))
}

fn um2(v: [f64; 2]) -> [f64; 2] {
    [v[0] * MICRO, v[1] * MICRO]
}

fn to_um(v: [f64; 2]) -> [f64; 2] {
    [v[0] / MICRO, v[1] / MICRO]
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n;
    let s = if v.len() > 1 {
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, s)
}

/// Axial fringe parameters measured on the standing-wave field.
#[derive(Debug, Clone, Copy)]
struct AxialFringes {
    visibility: f64,
    period: f64,
    antinode: f64,
}

/// Height of the intensity maximum nearest the image plane at the brightest
/// pixel, refined by a parabola through the neighbouring slices.
fn antinode_height(field: &IntensityField3D) -> f64 {
    let plane = field.slice(field.nearest_slice(0.0));
    let (r, c) = plane.argmax();
    let prof = field.axial_profile(r, c);
    let dz = field.z_step();
    let mut best: Option<(f64, f64)> = None;
    for i in 1..prof.len().saturating_sub(1) {
        if prof[i] >= prof[i - 1] && prof[i] > prof[i + 1] {
            let denom = prof[i - 1] - 2.0 * prof[i] + prof[i + 1];
            let shift = if denom != 0.0 { 0.5 * (prof[i - 1] - prof[i + 1]) / denom } else { 0.0 };
            let z = field.z[i] + shift * dz;
            if best.is_none_or(|(_, b)| z.abs() < b.abs()) {
                best = Some((prof[i], z));
            }
        }
    }
    best.map_or(0.0, |(_, z)| z)
}

struct Runner<'a> {
    sc: &'a Scenario,
    seed: u64,
    out: PathBuf,
    files: Vec<PathBuf>,
    pattern: Option<MirrorPattern>,
    field: Option<ComplexField2D>,
    intensity: Option<IntensityField2D>,
    potential: Option<Arc<PotentialField2D>>,
    standing_wave: Option<AxialFringes>,
    ensembles: Vec<AtomEnsemble>,
}

impl<'a> Runner<'a> {
    fn new(sc: &'a Scenario, seed: u64, out: PathBuf) -> Self {
        Self {
            sc,
            seed,
            out,
            files: Vec::new(),
            pattern: None,
            field: None,
            intensity: None,
            potential: None,
            standing_wave: None,
            ensembles: Vec::new(),
        }
    }

    fn run(&mut self, stage: Stage) -> Result<Metrics, StageError> {
        match stage {
            Stage::Pattern => self.pattern(),
            Stage::Intensity => self.intensity(),
            Stage::Potential => self.potential(),
            Stage::Simulate => self.simulate(),
            Stage::Transport => self.transport(),
            Stage::Rearrange => self.rearrange(),
            Stage::Tof => self.tof(),
            Stage::Image => self.image(),
        }
    }

    fn stage_seed(&self, stage: Stage) -> u64 {
        derive_seed(self.seed, stage as u64)
    }

    fn stage_dir(&self, stage: Stage) -> Result<PathBuf, StageError> {
        let dir = self.out.join(stage.name());
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn keep(&mut self, files: Vec<PathBuf>) {
        self.files.extend(files);
    }

    fn pattern(&mut self) -> Result<Metrics, StageError> {
        let cfg = self.sc.pattern.as_ref().expect("resolved stages are configured");
        let g = self.sc.geometry();
        let shape = match cfg.shapes.as_slice() {
            [] => return Err(StageError::config("pattern needs at least one shape")),
            [one] => one.clone(),
            many => ShapeSpec::Union {
                members: many.to_vec(),
            },
        };
        let map = rasterize_primitive(&shape, &g)?;
        let pattern = dither(&map.amplitude_target(), cfg.dither);
        let dir = self.stage_dir(Stage::Pattern)?;
        self.keep(io::write_target_map(&map, &dir.join("target.pgm"))?);
        self.keep(io::write_pbm(&pattern, &dir.join("mirrors.pbm"))?);

        let on = pattern.count_on();
        let mut m = Metrics::new();
        m.insert("mirrors_on".into(), json!(on));
        m.insert("fill_fraction".into(), json!(on as f64 / (g.rows * g.cols) as f64));
        m.insert("shape_bounds_um".into(), json!(shape.bounds_um()));
        m.insert("image_pitch_um".into(), json!(g.image_pitch() / MICRO));
        self.pattern = Some(pattern);
        Ok(m)
    }

    fn intensity(&mut self) -> Result<Metrics, StageError> {
        let cfg = self.sc.intensity.as_ref().expect("resolved stages are configured");
        let pattern = self.pattern.as_ref().expect("pattern stage ran");
        let sys = self.sc.optical_system();
        let g = self.sc.geometry();
        let [rows, cols] = cfg.window_mirrors;
        let win = MirrorWindow::centered(&g, rows, cols)?;
        let field = image_plane_field(pattern, &sys, Some(win))?;
        let intensity = field.intensity();
        let dir = self.stage_dir(Stage::Intensity)?;
        self.keep(io::write_intensity_field(&intensity, &dir.join("intensity.pgm"))?);

        let mut m = Metrics::new();
        m.insert("peak_intensity_W_per_mm2".into(), json!(intensity.max() / 1e6));
        m.insert("grid_spacing_um".into(), json!(intensity.spacing / MICRO));
        m.insert("psf_first_zero_um".into(), json!(sys.first_zero_radius() / MICRO));
        m.insert("centroid_um".into(), json!(intensity.centroid().map(to_um)));

        if let Some(sw) = &cfg.standing_wave {
            let (ny, nx) = field.data.dim();
            let p = sw.padded_samples;
            let padded = field.padded(p, p)?;
            let keep = PixelWindow {
                row0: (p - ny) / 2,
                col0: (p - nx) / 2,
                rows: ny,
                cols: nx,
            };
            let z = (sw.z_range_nm[0] * NANO, sw.z_range_nm[1] * NANO);
            let f3 = axial_standing_wave_window(&padded, &sys, z, sw.samples, keep)?;
            let fringes = AxialFringes {
                visibility: visibility(&f3, 0.0)?,
                period: fringe_period(&f3)?,
                antinode: antinode_height(&f3),
            };
            m.insert("visibility".into(), json!(fringes.visibility));
            m.insert("fringe_period_nm".into(), json!(fringes.period / NANO));
            m.insert("antinode_height_nm".into(), json!(fringes.antinode / NANO));
            m.insert("z_step_nm".into(), json!(f3.z_step() / NANO));
            self.standing_wave = Some(fringes);
            self.keep(io::write_intensity_field_3d(&f3, &dir, "standing_wave")?);
        }
        self.field = Some(field);
        self.intensity = Some(intensity);
        Ok(m)
    }

    fn potential(&mut self) -> Result<Metrics, StageError> {
        let intensity = self.intensity.as_ref().expect("intensity stage ran");
        let sys = self.sc.optical_system();
        let species = self.sc.atom_species();
        let params = TrapParameters::from_wavelengths(sys.wavelength, species.transition_wavelength);
        let pot = dipole_potential(intensity, &species, &params)?;
        let dir = self.stage_dir(Stage::Potential)?;
        self.keep(io::write_potential_csv(&pot, &dir.join("potential.csv"))?);

        let mut m = Metrics::new();
        m.insert("depth_uK".into(), json!(-joules_to_microkelvin(pot.min())));
        m.insert(
            "depth_at_peak_intensity_uK".into(),
            json!(joules_to_microkelvin(trap_depth(sys.peak_intensity, &species, &params)?)),
        );
        m.insert("detuning_GHz".into(), json!(params.detuning / (2.0 * std::f64::consts::PI) / 1e9));
        self.potential = Some(Arc::new(pot));
        Ok(m)
    }

    fn simulate(&mut self) -> Result<Metrics, StageError> {
        let cfg = self.sc.simulate.as_ref().expect("resolved stages are configured");
        let pot = self.potential.clone().expect("potential stage ran");
        let species = self.sc.atom_species();
        if cfg.cycles == 0 {
            return Err(StageError::config("simulate.cycles must be at least 1"));
        }
        if !(cfg.mean_atoms >= 0.0 && cfg.mean_atoms.is_finite()) {
            return Err(StageError::config("simulate.mean_atoms must be finite and non-negative"));
        }
        let (rows, cols) = pot.data.dim();
        let [hx, hy] = match cfg.sample_half_extent_um {
            Some(h) => um2(h),
            None => [
                0.5 * (pot.x_at(cols - 1) - pot.x_at(0)),
                0.5 * (pot.y_at(rows - 1) - pot.y_at(0)),
            ],
        };
        let (shared, center, hz): (SharedPotential, Vec3, f64) = match cfg.axial {
            Axial::Uniform => (pot.clone(), Vec3::zeros(), 0.0),
            Axial::StandingWave => {
                let f = self.standing_wave.ok_or_else(|| {
                    StageError::config("axial standing wave needs intensity.standing_wave to be configured")
                })?;
                let wrapped = AxialStandingWave {
                    inner: pot.clone(),
                    visibility: f.visibility,
                    period: f.period,
                    antinode: f.antinode,
                    depth: -pot.min(),
                };
                (Arc::new(wrapped), Vec3::new(0.0, 0.0, f.antinode), f.period / 2.0)
            }
        };
        let dist = ThermalDistribution::InTrap {
            potential: shared.clone(),
            center,
            half_extent: Vec3::new(hx, hy, hz),
        };

        let mut sim = SimulationConfig::new(PotentialSchedule::constant(shared), cfg.duration_us * MICRO);
        sim.loss_lifetime = cfg.loss_lifetime_ms.map(|t| t * 1e-3);
        if !cfg.gravity {
            sim.gravity = None;
        }
        sim.record_interval = cfg.record_interval_us * MICRO;
        if cfg.recoil {
            let sheet = self.sc.image.as_ref().map(|i| i.sheet.sheet()).unwrap_or_default();
            sim.recoil = Some(RecoilSource {
                rate: sheet.rate(&species),
                wavelength: species.transition_wavelength,
                sheet_center: sheet.plane_height,
                sheet_thickness: sheet.thickness,
            });
        }
        sim = match cfg.dt_us {
            Some(dt) => {
                sim.dt = dt * MICRO;
                sim
            }
            None => sim.with_auto_step(species.mass),
        };
        sim.validate(species.mass)?;

        let dir = self.stage_dir(Stage::Simulate)?;
        let base = self.stage_seed(Stage::Simulate);
        let (mut loaded, mut alive, mut temps) = (Vec::new(), Vec::new(), Vec::new());
        let mut ensembles = Vec::with_capacity(cfg.cycles);
        for c in 0..cfg.cycles {
            let seed = derive_seed(base, c as u64);
            let n = match cfg.loading {
                Loading::Fixed => cfg.mean_atoms.round() as usize,
                Loading::Poisson if cfg.mean_atoms > 0.0 => {
                    let p = Poisson::new(cfg.mean_atoms).map_err(|e| StageError::config(e.to_string()))?;
                    p.sample(&mut ChaCha8Rng::seed_from_u64(seed)) as usize
                }
                Loading::Poisson => 0,
            };
            let mut ens = if n == 0 {
                AtomEnsemble::empty(species.clone(), seed)
            } else {
                sample_thermal(n, cfg.temperature_uk * MICRO, &dist, &species, seed)?
            };
            if n > 0 {
                let rec = evolve(&mut ens, &sim)?;
                if c == 0 {
                    self.keep(io::write_trajectory_csv(&rec, &dir.join("trajectory_cycle000.csv"))?);
                }
                if ens.n_alive() > 0 {
                    temps.push(temperature_along(&ens, [true, true, false])? / MICRO);
                }
            }
            if c == 0 {
                let snap = Snapshot {
                    time: sim.duration,
                    positions: ens.positions().to_vec(),
                    velocities: ens.velocities().to_vec(),
                    alive: ens.alive().to_vec(),
                };
                self.keep(io::write_snapshot_csv(&snap, &dir.join("final_state_cycle000.csv"))?);
            }
            loaded.push(n as f64);
            alive.push(ens.n_alive() as f64);
            ensembles.push(ens);
        }

        let mut m = Metrics::new();
        m.insert("cycles".into(), json!(cfg.cycles));
        m.insert("dt_us".into(), json!(sim.dt / MICRO));
        m.insert("loaded_atoms_mean".into(), json!(mean_std(&loaded).0));
        m.insert("loaded_atoms_std".into(), json!(mean_std(&loaded).1));
        m.insert("alive_atoms_mean".into(), json!(mean_std(&alive).0));
        m.insert("final_temperature_uK".into(), json!(mean_std(&temps).0));
        self.ensembles = ensembles;
        Ok(m)
    }

    fn transport(&mut self) -> Result<Metrics, StageError> {
        let cfg = self.sc.transport.as_ref().expect("resolved stages are configured");
        if cfg.moves.is_empty() {
            return Err(StageError::config("transport needs at least one move"));
        }
        let species = self.sc.atom_species();
        let g = self.sc.geometry();
        let plans = cfg
            .moves
            .iter()
            .map(|mv| plan_release_recapture(&cfg.channel.request(mv.start_um, mv.end_um), &species))
            .collect::<Result<Vec<_>, _>>()?;
        let parallel = plan_parallel(&plans, &g)?;
        let frames = parallel.frames(&g, cfg.dither)?;
        let dir = self.stage_dir(Stage::Transport)?;

        let mut unique: Vec<&Arc<MirrorPattern>> = Vec::new();
        let mut names = Vec::with_capacity(frames.len());
        for f in frames.frames() {
            let k = match unique.iter().position(|u| Arc::ptr_eq(u, f)) {
                Some(k) => k,
                None => {
                    unique.push(f);
                    let k = unique.len() - 1;
                    self.files.extend(io::write_pbm(f, &dir.join(format!("frame_{k:03}.pbm")))?);
                    k
                }
            };
            names.push(format!("frame_{k:03}.pbm"));
        }
        let unique_frames = unique.len();
        self.keep(io::write_plan_json(&parallel, names, &dir.join("plan.json"))?);

        let seed = self.stage_seed(Stage::Transport);
        let vcfg = cfg.verify.config(seed);
        let reports = parallel.verify(&vcfg)?;
        let moves: Vec<Value> = parallel
            .plans
            .iter()
            .zip(&reports)
            .map(|(p, r)| {
                let rec = PlanRecord::from(p);
                json!({
                    "start_um": rec.start_um,
                    "end_um": rec.end_um,
                    "distance_um": rec.distance_um,
                    "half_period_us": rec.half_period_us,
                    "release_frame": rec.release_frame,
                    "recapture_frame": rec.recapture_frame,
                    "residual_us": rec.residual_us,
                    "warning": rec.warning,
                    "recapture_fraction": r.recapture_fraction,
                    "temperature_before_uK": r.initial_temperature / MICRO,
                    "temperature_after_uK": r.final_temperature / MICRO,
                    "delta_temperature_uK": r.delta_temperature / MICRO,
                    "arrival_um": r.arrival.map(to_um),
                })
            })
            .collect();

        let mut m = Metrics::new();
        m.insert("frame_rate_hz".into(), json!(parallel.frame_rate));
        m.insert("total_frames".into(), json!(parallel.total_frames));
        m.insert("unique_frames".into(), json!(unique_frames));
        m.insert("release_frame".into(), json!(parallel.release_frame));
        m.insert("moves".into(), Value::Array(moves));

        let plan = &parallel.plans[0];
        let start_well = plan.start_trap;
        let w = start_well.half_width_along.max(start_well.half_width_across);
        let dist = ThermalDistribution::InTrap {
            potential: Arc::new(start_well),
            center: Vec3::new(start_well.center[0], start_well.center[1], 0.0),
            half_extent: Vec3::new(w, w, 0.0),
        };

        if let Some(osc) = &cfg.oscillation {
            if plan.is_degenerate() {
                return Err(StageError::config("oscillation trace needs a move with distinct start and end"));
            }
            let mut ens = sample_thermal(vcfg.atoms, vcfg.temperature, &dist, &species, derive_seed(seed, 1))?;
            let t_rel = plan.release_time();
            let mut sim = SimulationConfig::new(
                plan.schedule_with_recapture(Some(f64::INFINITY)),
                t_rel + osc.duration_us * MICRO,
            );
            sim.dt = vcfg.dt;
            sim.loss_lifetime = vcfg.loss_lifetime;
            if !vcfg.gravity {
                sim.gravity = None;
            }
            sim.record_interval = osc.record_interval_us * MICRO;
            let sim = sim.with_auto_step(species.mass);
            let rec = evolve(&mut ens, &sim)?;
            self.keep(io::write_trajectory_csv(&rec, &dir.join("oscillation.csv"))?);

            let (s, e) = (plan.request.start, plan.request.end);
            let d = plan.distance();
            let (ux, uy) = ((e[0] - s[0]) / d, (e[1] - s[1]) / d);
            let c = plan.channel.center;
            let (t, y): (Vec<f64>, Vec<f64>) = rec
                .times
                .iter()
                .zip(&rec.center_of_mass)
                .filter(|(t, p)| **t >= t_rel && p.x.is_finite())
                .map(|(t, p)| (t - t_rel, (p.x - c[0]) * ux + (p.y - c[1]) * uy))
                .unzip();
            let fit = fit_damped_cosine(&t, &y)?;
            m.insert("oscillation_period_us".into(), json!(fit.period() / MICRO));
            m.insert("oscillation_amplitude_um".into(), json!(fit.amplitude.abs() / MICRO));
            m.insert(
                "oscillation_damping_time_us".into(),
                json!(if fit.damping_time.is_finite() {
                    Some(fit.damping_time / MICRO)
                } else {
                    None
                }),
            );
        }

        if let Some(scan) = &cfg.recapture_scan {
            if scan.points < 2 || scan.to_fraction <= scan.from_fraction || scan.from_fraction < 0.0 {
                return Err(StageError::config("recapture scan needs two or more increasing non-negative fractions"));
            }
            let fractions: Vec<f64> = (0..scan.points)
                .map(|k| {
                    scan.from_fraction + (scan.to_fraction - scan.from_fraction) * k as f64 / (scan.points - 1) as f64
                })
                .collect();
            let times: Vec<f64> = fractions.iter().map(|f| plan.release_time() + f * plan.half_period).collect();
            let values = recapture_scan(plan, &times, &vcfg)?;
            let path = dir.join("recapture.csv");
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["time_after_release_us", "fraction_of_half_period", "recapture_fraction"])?;
            for ((t, f), v) in times.iter().zip(&fractions).zip(&values) {
                w.write_record(&[
                    format!("{}", (t - plan.release_time()) / MICRO),
                    format!("{f}"),
                    format!("{v}"),
                ])?;
            }
            w.flush()?;
            self.keep(vec![path]);
            let best = (0..values.len()).fold(0, |b, i| if values[i] > values[b] { i } else { b });
            m.insert("recapture_peak_fraction".into(), json!(values[best]));
            m.insert("recapture_peak_time_after_release_us".into(), json!((times[best] - plan.release_time()) / MICRO));
        }
        Ok(m)
    }

    fn rearrange(&mut self) -> Result<Metrics, StageError> {
        let cfg = self.sc.rearrange.as_ref().expect("resolved stages are configured");
        let species = self.sc.atom_species();
        let g = self.sc.geometry();
        let sources: Vec<[f64; 2]> = cfg.sources_um.iter().map(|&p| um2(p)).collect();
        let targets: Vec<[f64; 2]> = cfg.targets_um.iter().map(|&p| um2(p)).collect();
        let template = cfg.channel.request([0.0; 2], [0.0; 2]);
        let plan = plan_rearrangement(&sources, &targets, &template, &species, &g)?;

        let batches: Vec<Value> = plan
            .batches
            .iter()
            .map(|b| {
                json!({
                    "release_frame": b.release_frame,
                    "total_frames": b.total_frames,
                    "plans": b.plans.iter().map(PlanRecord::from).collect::<Vec<_>>(),
                })
            })
            .collect();
        let total_cost_um2 = plan.total_cost / (MICRO * MICRO);
        let record = json!({
            "pairs": plan.assignment.pairs,
            "total_cost_um2": total_cost_um2,
            "batches": batches,
        });
        let dir = self.stage_dir(Stage::Rearrange)?;
        self.keep(io::write_json_file(&record, &dir.join("plan.json"))?);

        let frames: usize = plan.batches.iter().map(|b| b.total_frames).sum();
        let mut m = Metrics::new();
        m.insert("sources".into(), json!(sources.len()));
        m.insert("targets".into(), json!(targets.len()));
        m.insert("moves".into(), json!(plan.batches.iter().map(|b| b.plans.len()).sum::<usize>()));
        m.insert("batches".into(), json!(plan.batches.len()));
        m.insert("total_cost_um2".into(), json!(total_cost_um2));
        m.insert("total_frames".into(), json!(frames));
        Ok(m)
    }

    fn tof(&mut self) -> Result<Metrics, StageError> {
        let cfg = self.sc.tof.as_ref().expect("resolved stages are configured");
        let species = self.sc.atom_species();
        let s = cfg.initial_sigma_um;
        let dist = ThermalDistribution::GaussianCloud {
            center: Vec3::zeros(),
            sigma: Vec3::new(s[0], s[1], s[2]) * MICRO,
        };
        let ens = sample_thermal(
            cfg.atoms,
            cfg.temperature_uk * MICRO,
            &dist,
            &species,
            self.stage_seed(Stage::Tof),
        )?;
        let times: Vec<f64> = cfg.times_us.iter().map(|t| t * MICRO).collect();
        let fit = time_of_flight_fit(&ens, &times)?;

        let dir = self.stage_dir(Stage::Tof)?;
        let path = dir.join("widths.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["time_us", "width_um"])?;
        for (t, s) in fit.times.iter().zip(&fit.widths) {
            w.write_record(&[format!("{}", t / MICRO), format!("{}", s / MICRO)])?;
        }
        w.flush()?;
        self.keep(vec![path]);

        let mut m = Metrics::new();
        m.insert("atoms".into(), json!(cfg.atoms));
        m.insert("temperature_uK".into(), json!(fit.temperature / MICRO));
        m.insert("initial_width_um".into(), json!(fit.sigma0 / MICRO));
        m.insert(
            "final_width_um".into(),
            json!(fit.widths.last().map(|w| w / MICRO)),
        );
        Ok(m)
    }

    fn image(&mut self) -> Result<Metrics, StageError> {
        let cfg = self.sc.image.as_ref().expect("resolved stages are configured");
        let species = self.sc.atom_species();
        let (sheet, det) = (cfg.sheet.sheet(), cfg.detection.model());
        let budget = photon_budget(&sheet, &det, &species);
        if !budget.detected.is_finite() || budget.detected <= 0.0 {
            return Err(StageError::numerical("detected photons per atom must be positive"));
        }
        let regions: Vec<_> = cfg.regions.iter().map(|r| (r.name.clone(), r.region.parts())).collect();
        let base = self.stage_seed(Stage::Image);

        let mut estimates: Vec<Vec<f64>> = vec![Vec::new(); regions.len()];
        let mut sum: Option<FluorescenceImage> = None;
        let mut first = None;
        for (c, ens) in self.ensembles.iter().enumerate() {
            let img = render_fluorescence(ens, &sheet, &det, derive_seed(base, c as u64))?;
            for (k, (_, (plus, minus))) in regions.iter().enumerate() {
                let n = img.counts_in(plus) as f64 - minus.map_or(0.0, |r| img.counts_in(&r) as f64);
                estimates[k].push(n / budget.detected);
            }
            match &mut sum {
                Some(s) => {
                    s.counts += &img.counts;
                    s.exposure += img.exposure;
                }
                None => sum = Some(img.clone()),
            }
            if first.is_none() {
                first = Some(img);
            }
        }
        let (Some(sum), Some(first)) = (sum, first) else {
            return Err(StageError::numerical("no ensembles to image"));
        };

        let dir = self.stage_dir(Stage::Image)?;
        self.keep(io::write_fluorescence_image(&first, &dir.join("fluorescence_cycle000.pgm"))?);
        self.keep(io::write_fluorescence_image(&sum, &dir.join("fluorescence_sum.pgm"))?);
        let path = dir.join("atom_numbers.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["cycle", "region", "atoms"])?;
        for (k, (name, _)) in regions.iter().enumerate() {
            for (c, n) in estimates[k].iter().enumerate() {
                w.write_record(&[c.to_string(), name.clone(), format!("{n}")])?;
            }
        }
        w.flush()?;
        self.keep(vec![path]);

        let cycles = self.ensembles.len();
        let mut per_region = serde_json::Map::new();
        for (k, (name, _)) in regions.iter().enumerate() {
            let (mean, std) = mean_std(&estimates[k]);
            per_region.insert(
                name.clone(),
                json!({
                    "mean": mean,
                    "std": std,
                    "stderr": std / (cycles as f64).sqrt(),
                }),
            );
        }
        let mut m = Metrics::new();
        m.insert("cycles".into(), json!(cycles));
        m.insert("photons_emitted_per_atom".into(), json!(budget.emitted));
        m.insert("photons_detected_per_atom".into(), json!(budget.detected));
        m.insert("total_counts_mean".into(), json!(sum.total() as f64 / cycles as f64));
        m.insert("atom_numbers".into(), Value::Object(per_region));
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_per_stream() {
        let a: Vec<u64> = (0..64).map(|k| derive_seed(7, k)).collect();
        let mut b = a.clone();
        b.sort();
        b.dedup();
        assert_eq!(a.len(), b.len());
        assert_ne!(derive_seed(7, 0), derive_seed(8, 0));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }

    #[test]
    fn mean_and_sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn manifest_is_sorted_relative_and_hashed() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("b").join("x.txt");
        fs::create_dir_all(a.parent().unwrap()).unwrap();
        fs::write(&a, b"abc").unwrap();
        let z = dir.path().join("a.txt");
        fs::write(&z, b"").unwrap();
        let m = build_manifest(dir.path(), &[a, z]).unwrap();
        assert_eq!(m[0].path, "a.txt");
        assert_eq!(m[1].path, "b/x.txt");
        assert_eq!(m[1].bytes, 3);
        // Known SHA-256 digests.
        assert_eq!(m[0].sha256, "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
        assert_eq!(m[1].sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
