//! Scenario file schema. Every physical quantity carries its unit in the key
//! name; conversion to SI happens here and nowhere else.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use tweezer_core::constants::{microkelvin_to_joules, MICRO, NANO};
use tweezer_core::dynamics::Region;
use tweezer_core::imaging::{DetectionModel, LightSheet};
use tweezer_core::optics::{Illumination, OpticalSystem};
use tweezer_core::patterns::{DeviceGeometry, DitherMethod, ShapeSpec};
use tweezer_core::potential::AtomSpecies;
use tweezer_core::transport::{TransportRequest, VerifyConfig};

use crate::error::ScenarioError;

/// Pipeline stages in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pattern,
    Intensity,
    Potential,
    Simulate,
    Transport,
    Rearrange,
    Tof,
    Image,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Pattern,
        Stage::Intensity,
        Stage::Potential,
        Stage::Simulate,
        Stage::Transport,
        Stage::Rearrange,
        Stage::Tof,
        Stage::Image,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pattern => "pattern",
            Stage::Intensity => "intensity",
            Stage::Potential => "potential",
            Stage::Simulate => "simulate",
            Stage::Transport => "transport",
            Stage::Rearrange => "rearrange",
            Stage::Tof => "tof",
            Stage::Image => "image",
        }
    }

    /// Stage whose output this one consumes.
    pub fn requires(self) -> Option<Stage> {
        match self {
            Stage::Intensity => Some(Stage::Pattern),
            Stage::Potential => Some(Stage::Intensity),
            Stage::Simulate => Some(Stage::Potential),
            Stage::Image => Some(Stage::Simulate),
            _ => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "optics" => return Ok(Stage::Intensity),
            "dynamics" => return Ok(Stage::Simulate),
            "imaging" => return Ok(Stage::Image),
            _ => {}
        }
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    /// Relative paths resolve against the working directory.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Stages to run; empty runs every configured stage.
    #[serde(default)]
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub device: DeviceConfig,
    #[serde(default)]
    pub optics: OpticsConfig,
    #[serde(default)]
    pub species: Species,
    #[serde(default)]
    pub pattern: Option<PatternConfig>,
    #[serde(default)]
    pub intensity: Option<IntensityConfig>,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
    #[serde(default)]
    pub transport: Option<TransportConfig>,
    #[serde(default)]
    pub rearrange: Option<RearrangeConfig>,
    #[serde(default)]
    pub tof: Option<TofConfig>,
    #[serde(default)]
    pub image: Option<ImageConfig>,
}

impl Scenario {
    pub fn from_path(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Read {
            path: path.display().to_string(),
            source,
        })?;
        text.parse()
    }

    /// Whether the section a stage reads is present.
    pub fn configures(&self, stage: Stage) -> bool {
        match stage {
            Stage::Pattern => self.pattern.is_some(),
            Stage::Intensity => self.intensity.is_some(),
            Stage::Potential => self.intensity.is_some(),
            Stage::Simulate => self.simulate.is_some(),
            Stage::Transport => self.transport.is_some(),
            Stage::Rearrange => self.rearrange.is_some(),
            Stage::Tof => self.tof.is_some(),
            Stage::Image => self.image.is_some(),
        }
    }

    /// Requested stages plus everything they depend on, in pipeline order.
    pub fn resolve_stages(&self, requested: &[Stage]) -> Result<Vec<Stage>, ScenarioError> {
        let mut wanted: Vec<Stage> = if requested.is_empty() {
            if self.stages.is_empty() {
                Stage::ALL.into_iter().filter(|s| self.configures(*s)).collect()
            } else {
                self.stages.clone()
            }
        } else {
            requested.to_vec()
        };
        let mut i = 0;
        while i < wanted.len() {
            if let Some(dep) = wanted[i].requires() {
                if !wanted.contains(&dep) {
                    wanted.push(dep);
                }
            }
            i += 1;
        }
        wanted.sort();
        wanted.dedup();
        for s in &wanted {
            if !self.configures(*s) {
                return Err(ScenarioError::Invalid(format!("stage '{s}' has no configuration section")));
            }
        }
        if wanted.is_empty() {
            return Err(ScenarioError::Invalid("no stages to run".into()));
        }
        Ok(wanted)
    }

    pub fn geometry(&self) -> DeviceGeometry {
        self.device.geometry()
    }

    /// The optical system, imaging at the device's demagnification.
    pub fn optical_system(&self) -> OpticalSystem {
        OpticalSystem {
            demagnification: self.device.demagnification,
            ..self.optics.system()
        }
    }

    pub fn atom_species(&self) -> AtomSpecies {
        match self.species {
            Species::Rb87 => AtomSpecies::rubidium87(),
        }
    }
}

impl FromStr for Scenario {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let sc: Scenario = serde_json::from_str(s)?;
        if sc.name.trim().is_empty() {
            return Err(ScenarioError::Invalid("scenario name is empty".into()));
        }
        Ok(sc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Species {
    #[default]
    #[serde(rename = "rb87")]
    Rb87,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceConfig {
    pub rows: usize,
    pub cols: usize,
    pub pitch_um: f64,
    pub demagnification: f64,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        let g = DeviceGeometry::default();
        Self {
            rows: g.rows,
            cols: g.cols,
            pitch_um: g.pitch / MICRO,
            demagnification: g.demagnification,
        }
    }
}

impl DeviceConfig {
    pub fn geometry(&self) -> DeviceGeometry {
        DeviceGeometry {
            rows: self.rows,
            cols: self.cols,
            pitch: self.pitch_um * MICRO,
            demagnification: self.demagnification,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpticsConfig {
    pub numerical_aperture: f64,
    pub wavelength_nm: f64,
    pub mirror_distance_um: f64,
    pub mirror_reflectivity: f64,
    #[serde(rename = "peak_intensity_W_per_mm2")]
    pub peak_intensity_w_per_mm2: f64,
    pub illumination: Illumination,
    pub grid_oversample: usize,
}

impl Default for OpticsConfig {
    fn default() -> Self {
        let s = OpticalSystem::default();
        Self {
            numerical_aperture: s.numerical_aperture,
            wavelength_nm: s.wavelength / NANO,
            mirror_distance_um: s.mirror_distance / MICRO,
            mirror_reflectivity: s.mirror_reflectivity,
            peak_intensity_w_per_mm2: s.peak_intensity / 1e6,
            illumination: s.illumination,
            grid_oversample: s.grid_oversample,
        }
    }
}

impl OpticsConfig {
    pub fn system(&self) -> OpticalSystem {
        OpticalSystem {
            numerical_aperture: self.numerical_aperture,
            wavelength: self.wavelength_nm * NANO,
            mirror_distance: self.mirror_distance_um * MICRO,
            mirror_reflectivity: self.mirror_reflectivity,
            peak_intensity: self.peak_intensity_w_per_mm2 * 1e6,
            illumination: self.illumination,
            grid_oversample: self.grid_oversample,
            ..OpticalSystem::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternConfig {
    pub shapes: Vec<ShapeSpec>,
    #[serde(default)]
    pub dither: DitherMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntensityConfig {
    /// Mirrors imaged around the device centre, `[rows, cols]`.
    pub window_mirrors: [usize; 2],
    pub standing_wave: Option<StandingWaveConfig>,
}

impl Default for IntensityConfig {
    fn default() -> Self {
        Self {
            window_mirrors: [200, 200],
            standing_wave: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StandingWaveConfig {
    /// Heights above the image plane, `[min, max]`.
    pub z_range_nm: [f64; 2],
    pub samples: usize,
    /// Transverse size of the zero-padded propagation grid.
    pub padded_samples: usize,
}

impl Default for StandingWaveConfig {
    fn default() -> Self {
        Self {
            z_range_nm: [-392.5, 392.5],
            samples: 17,
            padded_samples: 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loading {
    /// Exactly `mean_atoms` (rounded) per cycle.
    Fixed,
    /// Poisson-distributed atom number per cycle.
    #[default]
    Poisson,
}

/// Extension of the in-plane potential along z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axial {
    /// No axial confinement.
    #[default]
    Uniform,
    /// Envelope of the axial standing wave measured by the intensity stage.
    StandingWave,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Independent loading cycles, each with its own ensemble.
    pub cycles: usize,
    pub mean_atoms: f64,
    pub loading: Loading,
    pub axial: Axial,
    #[serde(rename = "temperature_uK")]
    pub temperature_uk: f64,
    /// Half size of the box thermal samples are drawn from; defaults to the
    /// imaged window.
    pub sample_half_extent_um: Option<[f64; 2]>,
    pub duration_us: f64,
    /// `null` picks the largest stable step.
    pub dt_us: Option<f64>,
    pub record_interval_us: f64,
    /// `null` disables one-body loss.
    pub loss_lifetime_ms: Option<f64>,
    pub gravity: bool,
    /// Photon recoil from the imaging light sheet during the run.
    pub recoil: bool,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            cycles: 1,
            mean_atoms: 100.0,
            loading: Loading::Poisson,
            axial: Axial::Uniform,
            temperature_uk: 30.0,
            sample_half_extent_um: None,
            duration_us: 90.0,
            dt_us: None,
            record_interval_us: 10.0,
            loss_lifetime_ms: Some(50.0),
            gravity: false,
            recoil: false,
        }
    }
}

/// Trap and channel settings shared by transport and rearrangement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    #[serde(rename = "depth_uK")]
    pub depth_uk: f64,
    pub trap_waist_um: f64,
    pub channel_half_length_um: f64,
    pub channel_half_width_um: f64,
    pub frame_rate_hz: f64,
    pub hold_before_frames: usize,
    pub hold_after_frames: usize,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        let r = TransportRequest::new([0.0; 2], [0.0; 2], 0.0);
        Self {
            depth_uk: 100.0,
            trap_waist_um: r.trap_waist / MICRO,
            channel_half_length_um: r.channel_half_length / MICRO,
            channel_half_width_um: r.channel_half_width / MICRO,
            frame_rate_hz: r.frame_rate,
            hold_before_frames: r.hold_before_frames,
            hold_after_frames: r.hold_after_frames,
        }
    }
}

impl ChannelConfig {
    pub fn request(&self, start_um: [f64; 2], end_um: [f64; 2]) -> TransportRequest {
        TransportRequest {
            start: [start_um[0] * MICRO, start_um[1] * MICRO],
            end: [end_um[0] * MICRO, end_um[1] * MICRO],
            depth: microkelvin_to_joules(self.depth_uk),
            trap_waist: self.trap_waist_um * MICRO,
            channel_half_length: self.channel_half_length_um * MICRO,
            channel_half_width: self.channel_half_width_um * MICRO,
            frame_rate: self.frame_rate_hz,
            hold_before_frames: self.hold_before_frames,
            hold_after_frames: self.hold_after_frames,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoveConfig {
    pub start_um: [f64; 2],
    pub end_um: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySettings {
    pub atoms: usize,
    #[serde(rename = "temperature_uK")]
    pub temperature_uk: f64,
    pub dt_us: f64,
    pub loss_lifetime_ms: Option<f64>,
    pub gravity: bool,
    pub hold_after_us: f64,
    pub temperature_samples: usize,
}

impl Default for VerifySettings {
    fn default() -> Self {
        let v = VerifyConfig::default();
        Self {
            atoms: v.atoms,
            temperature_uk: v.temperature / MICRO,
            dt_us: v.dt / MICRO,
            loss_lifetime_ms: v.loss_lifetime.map(|t| t * 1e3),
            gravity: v.gravity,
            hold_after_us: v.hold_after / MICRO,
            temperature_samples: v.temperature_samples,
        }
    }
}

impl VerifySettings {
    pub fn config(&self, seed: u64) -> VerifyConfig {
        VerifyConfig {
            atoms: self.atoms,
            temperature: self.temperature_uk * MICRO,
            seed,
            dt: self.dt_us * MICRO,
            loss_lifetime: self.loss_lifetime_ms.map(|t| t * 1e-3),
            gravity: self.gravity,
            hold_after: self.hold_after_us * MICRO,
            temperature_samples: self.temperature_samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OscillationConfig {
    /// Time after release.
    pub duration_us: f64,
    pub record_interval_us: f64,
}

impl Default for OscillationConfig {
    fn default() -> Self {
        Self {
            duration_us: 2000.0,
            record_interval_us: 10.0,
        }
    }
}

/// Candidate recapture times, as fractions of the half period after release.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecaptureScanConfig {
    pub from_fraction: f64,
    pub to_fraction: f64,
    pub points: usize,
}

impl Default for RecaptureScanConfig {
    fn default() -> Self {
        Self {
            from_fraction: 0.0,
            to_fraction: 2.0,
            points: 41,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportConfig {
    pub moves: Vec<MoveConfig>,
    #[serde(default)]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub dither: DitherMethod,
    #[serde(default)]
    pub verify: VerifySettings,
    /// Centre-of-mass trace of atoms left in the channel; first move only.
    #[serde(default)]
    pub oscillation: Option<OscillationConfig>,
    /// Recapture fraction against switch-on time; first move only.
    #[serde(default)]
    pub recapture_scan: Option<RecaptureScanConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RearrangeConfig {
    pub sources_um: Vec<[f64; 2]>,
    pub targets_um: Vec<[f64; 2]>,
    #[serde(default)]
    pub channel: ChannelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TofConfig {
    pub atoms: usize,
    #[serde(rename = "temperature_uK")]
    pub temperature_uk: f64,
    pub initial_sigma_um: [f64; 3],
    pub times_us: Vec<f64>,
}

impl Default for TofConfig {
    fn default() -> Self {
        Self {
            atoms: 10_000,
            temperature_uk: 90.0,
            initial_sigma_um: [1.0; 3],
            times_us: (1..=8).map(|k| 250.0 * k as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SheetConfig {
    pub thickness_um: f64,
    pub width_mm: f64,
    /// Detuning from resonance, `Δ/2π`.
    #[serde(rename = "detuning_MHz")]
    pub detuning_mhz: f64,
    #[serde(rename = "power_uW")]
    pub power_uw: f64,
    pub retro_reflected: bool,
    pub exposure_us: f64,
    pub plane_height_um: f64,
    /// `null` uses the free-space rate at the sheet intensity.
    pub nominal_rate_per_us: Option<f64>,
}

impl Default for SheetConfig {
    fn default() -> Self {
        let s = LightSheet::default();
        Self {
            thickness_um: s.thickness / MICRO,
            width_mm: s.width * 1e3,
            detuning_mhz: s.detuning / (2.0 * std::f64::consts::PI) / 1e6,
            power_uw: s.power / MICRO,
            retro_reflected: s.retro_reflected,
            exposure_us: s.exposure / MICRO,
            plane_height_um: s.plane_height / MICRO,
            nominal_rate_per_us: s.nominal_rate.map(|r| r * MICRO),
        }
    }
}

impl SheetConfig {
    pub fn sheet(&self) -> LightSheet {
        LightSheet {
            thickness: self.thickness_um * MICRO,
            width: self.width_mm * 1e-3,
            detuning: 2.0 * std::f64::consts::PI * self.detuning_mhz * 1e6,
            power: self.power_uw * MICRO,
            retro_reflected: self.retro_reflected,
            exposure: self.exposure_us * MICRO,
            plane_height: self.plane_height_um * MICRO,
            nominal_rate: self.nominal_rate_per_us.map(|r| r / MICRO),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    pub eta_lens: f64,
    pub eta_loss: f64,
    pub eta_qe: f64,
    pub calibrated_total: Option<f64>,
    pub pixel_size_um: f64,
    /// `[rows, cols]`
    pub image_shape: [usize; 2],
    pub image_center_um: [f64; 2],
    pub wavelength_nm: f64,
    pub numerical_aperture: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        let d = DetectionModel::default();
        Self {
            eta_lens: d.eta_lens,
            eta_loss: d.eta_loss,
            eta_qe: d.eta_qe,
            calibrated_total: d.calibrated_total,
            pixel_size_um: d.pixel_size / MICRO,
            image_shape: [d.image_shape.0, d.image_shape.1],
            image_center_um: [d.image_center[0] / MICRO, d.image_center[1] / MICRO],
            wavelength_nm: d.wavelength / NANO,
            numerical_aperture: d.numerical_aperture,
        }
    }
}

impl DetectionConfig {
    pub fn model(&self) -> DetectionModel {
        DetectionModel {
            eta_lens: self.eta_lens,
            eta_loss: self.eta_loss,
            eta_qe: self.eta_qe,
            calibrated_total: self.calibrated_total,
            pixel_size: self.pixel_size_um * MICRO,
            image_shape: (self.image_shape[0], self.image_shape[1]),
            image_center: [self.image_center_um[0] * MICRO, self.image_center_um[1] * MICRO],
            wavelength: self.wavelength_nm * NANO,
            numerical_aperture: self.numerical_aperture,
        }
    }
}

/// Counting region in the image plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegionSpec {
    All,
    Disk {
        center_um: [f64; 2],
        radius_um: f64,
    },
    Annulus {
        center_um: [f64; 2],
        inner_radius_um: f64,
        outer_radius_um: f64,
    },
    Box {
        min_um: [f64; 2],
        max_um: [f64; 2],
    },
}

impl RegionSpec {
    /// Regions whose counts are added and subtracted, respectively.
    pub fn parts(&self) -> (Region, Option<Region>) {
        let um = |c: [f64; 2]| [c[0] * MICRO, c[1] * MICRO];
        match *self {
            RegionSpec::All => (Region::All, None),
            RegionSpec::Disk { center_um, radius_um } => (
                Region::Disk {
                    center: um(center_um),
                    radius: radius_um * MICRO,
                },
                None,
            ),
            RegionSpec::Annulus {
                center_um,
                inner_radius_um,
                outer_radius_um,
            } => (
                Region::Disk {
                    center: um(center_um),
                    radius: outer_radius_um * MICRO,
                },
                Some(Region::Disk {
                    center: um(center_um),
                    radius: inner_radius_um * MICRO,
                }),
            ),
            RegionSpec::Box { min_um, max_um } => (
                Region::Box {
                    min: [min_um[0] * MICRO, min_um[1] * MICRO, f64::NEG_INFINITY],
                    max: [max_um[0] * MICRO, max_um[1] * MICRO, f64::INFINITY],
                },
                None,
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedRegion {
    pub name: String,
    pub region: RegionSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageConfig {
    pub sheet: SheetConfig,
    pub detection: DetectionConfig,
    pub regions: Vec<NamedRegion>,
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self {
            sheet: SheetConfig::default(),
            detection: DetectionConfig::default(),
            regions: vec![NamedRegion {
                name: "all".into(),
                region: RegionSpec::All,
            }],
        }
    }
}
