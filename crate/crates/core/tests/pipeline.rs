use std::sync::Arc;

use tweezer_core::constants::MICRO;
use tweezer_core::dynamics::{
    evolve, linear_fit, oscillation_fit, sample_thermal, AtomEnsemble, Region, SimulationConfig, ThermalDistribution,
};
use tweezer_core::imaging::{
    estimate_atom_number, photon_budget, render_fluorescence, DetectionModel, LightSheet,
};
use tweezer_core::io;
use tweezer_core::optics::{
    axial_standing_wave_window, image_plane_field, image_plane_intensity, visibility, MirrorWindow, OpticalSystem,
    PixelWindow,
};
use tweezer_core::patterns::{dither, rasterize_primitive, DeviceGeometry, DitherMethod, ShapeSpec};
use tweezer_core::potential::{
    depth_from_microkelvin, dipole_potential, AtomSpecies, HarmonicWell, PotentialSchedule, TrapParameters,
    ZeroPotential,
};
use tweezer_core::transport::{plan_parallel, plan_release_recapture, Phase, TransportRequest};
use tweezer_core::Vec3;

fn rb() -> AtomSpecies {
    AtomSpecies::rubidium87()
}

#[test]
fn small_channel_oscillation_frequency() {
    let u0 = depth_from_microkelvin(100.0);
    let w = 26e-6;
    let channel = HarmonicWell {
        center: [0.0, 0.0],
        half_width_along: w,
        half_width_across: 6e-6,
        angle: 0.3,
        depth: u0,
        clamped: true,
    };
    let (s, c) = 0.3f64.sin_cos();
    let a = 0.1 * w;
    let mut e = AtomEnsemble::from_parts(vec![Vec3::new(a * c, a * s, 0.0)], vec![Vec3::zeros()], rb(), 0).unwrap();
    let mut cfg = SimulationConfig::new(PotentialSchedule::constant(Arc::new(channel)), 5e-3);
    cfg.loss_lifetime = None;
    let cfg = cfg.with_auto_step(rb().mass);
    let rec = evolve(&mut e, &cfg).unwrap();
    let fit = oscillation_fit(&rec, 0).unwrap();
    let omega = (2.0 * u0 / (rb().mass * w * w)).sqrt();
    assert!((fit.angular_frequency / omega - 1.0).abs() < 0.02, "{} vs {omega}", fit.angular_frequency);
}

#[test]
fn survival_curve_rate() {
    let n = 10_000;
    let mut e = AtomEnsemble::from_parts(vec![Vec3::zeros(); n], vec![Vec3::zeros(); n], rb(), 17).unwrap();
    let mut cfg = SimulationConfig::new(PotentialSchedule::constant(Arc::new(ZeroPotential)), 100e-3);
    cfg.gravity = None;
    cfg.dt = 10e-6;
    cfg.record_interval = 5e-3;
    let rec = evolve(&mut e, &cfg).unwrap();
    let logs: Vec<f64> = rec.n_alive.iter().map(|&k| (k as f64 / n as f64).ln()).collect();
    let (_, slope) = linear_fit(&rec.times, &logs).unwrap();
    let rate = -slope;
    assert!((rate * 50e-3 - 1.0).abs() < 0.05, "{rate}");
}

#[test]
fn parallel_frames_do_not_interfere() {
    let u0 = depth_from_microkelvin(100.0);
    let g = DeviceGeometry::default();
    let a = plan_release_recapture(&TransportRequest::new([-4e-6, -8e-6], [4e-6, -8e-6], u0), &rb()).unwrap();
    let b = plan_release_recapture(&TransportRequest::new([4.5e-6, 8e-6], [-4.5e-6, 8e-6], u0), &rb()).unwrap();
    let both = plan_parallel(&[a.clone(), b.clone()], &g).unwrap();
    let combined = both.frames(&g, DitherMethod::Ordered).unwrap();
    for (own, other) in [(&both.plans[0], &both.plans[1]), (&both.plans[1], &both.plans[0])] {
        let single = own.frames(&g, DitherMethod::Ordered).unwrap();
        // Blocks the other plan never lights.
        let mut other_lit = ndarray::Array2::from_elem((g.rows / 4, g.cols / 4), false);
        for phase in [Phase::Start, Phase::Channel, Phase::End] {
            let map = rasterize_primitive(&other.phase_shape(phase), &g).unwrap();
            for ((r, c), &v) in map.grid().indexed_iter() {
                if v > 0.0 {
                    other_lit[[r / 4, c / 4]] = true;
                }
            }
        }
        let offset = both.release_frame - own.release_frame;
        for f in 0..own.total_frames {
            let (s, p) = (&single.frames()[f], &combined.frames()[f + offset]);
            for ((r, c), &on) in s.cells().indexed_iter() {
                if !other_lit[[r / 4, c / 4]] {
                    assert_eq!(on, p.get(r, c), "frame {f} cell ({r}, {c})");
                }
            }
        }
    }
}

#[test]
fn visibility_grows_with_trap_size() {
    let sys = OpticalSystem::default();
    let g = DeviceGeometry::default();
    let mut last = 0.0;
    for radius in [3.0, 6.0, 12.0] {
        let map = rasterize_primitive(&ShapeSpec::disk([0.0, 0.0], radius), &g).unwrap();
        let pattern = dither(&map.amplitude_target(), DitherMethod::Ordered);
        let win = MirrorWindow::centered(&g, 128, 128).unwrap();
        let field = image_plane_field(&pattern, &sys, Some(win)).unwrap().padded(768, 768).unwrap();
        let keep = PixelWindow {
            row0: 384 - 128,
            col0: 384 - 128,
            rows: 256,
            cols: 256,
        };
        let lambda = sys.wavelength;
        let f = axial_standing_wave_window(&field, &sys, (-lambda / 2.0, lambda / 2.0), 17, keep).unwrap();
        let v = visibility(&f, 0.0).unwrap();
        assert!(v > last, "radius {radius} um: {v} <= {last}");
        last = v;
    }
}

#[test]
fn counts_scale_with_atom_number_and_estimator_is_unbiased() {
    let (sheet, det) = (LightSheet::default(), DetectionModel::default());
    let budget = photon_budget(&sheet, &det, &rb());
    let region = Region::Disk {
        center: [0.0, 0.0],
        radius: 20e-6,
    };
    let mut means = Vec::new();
    for n in [1usize, 4, 16] {
        let pts: Vec<Vec3> = (0..n).map(|i| Vec3::new((i % 4) as f64 * 2e-6, (i / 4) as f64 * 2e-6, 0.0)).collect();
        let e = AtomEnsemble::from_parts(pts, vec![Vec3::zeros(); n], rb(), 0).unwrap();
        let seeds = 60;
        let est: Vec<f64> = (0..seeds)
            .map(|s| estimate_atom_number(&render_fluorescence(&e, &sheet, &det, s).unwrap(), &budget, &region).unwrap())
            .collect();
        let mean = est.iter().sum::<f64>() / seeds as f64;
        // Poisson error of the mean, with a small allowance for PSF tails.
        let sigma = (n as f64 / budget.detected / seeds as f64).sqrt();
        assert!((mean - n as f64).abs() < 4.0 * sigma + 0.01 * n as f64, "n = {n}: {mean}");
        means.push(mean / n as f64);
    }
    assert!(means.iter().all(|m| (m - means[0]).abs() < 0.05));
}

#[test]
fn pattern_to_image_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let g = DeviceGeometry::default();
    let sys = OpticalSystem::default();
    let s = rb();

    let shape = ShapeSpec::round_harmonic([0.0, 0.0], 6.0);
    let map = rasterize_primitive(&shape, &g).unwrap();
    let pattern = dither(&map.amplitude_target(), DitherMethod::Ordered);
    let pbm = dir.path().join("trap.pbm");
    io::write_pbm(&pattern, &pbm).unwrap();
    assert_eq!(io::read_pbm(&pbm, g).unwrap(), pattern);

    let win = MirrorWindow::centered(&g, 80, 80).unwrap();
    let field = image_plane_intensity(&pattern, &sys, Some(win)).unwrap();
    let [cx, cy] = field.centroid().unwrap();
    assert!(cx.abs() < 0.2e-6 && cy.abs() < 0.2e-6);
    let params = TrapParameters::from_wavelengths(sys.wavelength, s.transition_wavelength);
    let pot = dipole_potential(&field, &s, &params).unwrap();
    assert!(pot.min() < 0.0 && pot.max() <= 0.0);
    io::write_potential_csv(&pot, &dir.path().join("u.csv")).unwrap();

    let pot = Arc::new(pot);
    let dist = ThermalDistribution::InTrap {
        potential: pot.clone(),
        center: Vec3::zeros(),
        half_extent: Vec3::new(6e-6, 6e-6, 0.0),
    };
    let mut ens = sample_thermal(200, 30e-6, &dist, &s, 3).unwrap();
    let mut cfg = SimulationConfig::new(PotentialSchedule::constant(pot), 200e-6);
    cfg.gravity = None;
    let cfg = cfg.with_auto_step(s.mass);
    let rec = evolve(&mut ens, &cfg).unwrap();
    io::write_trajectory_csv(&rec, &dir.path().join("traj.csv")).unwrap();
    assert!(ens.n_alive() > 150);

    let img = render_fluorescence(&ens, &LightSheet::default(), &DetectionModel::default(), 5).unwrap();
    let files = io::write_fluorescence_image(&img, &dir.path().join("img.pgm")).unwrap();
    assert_eq!(files.len(), 2);
    let [ix, iy] = img.centroid().unwrap();
    assert!(ix.abs() < 1.5 * MICRO && iy.abs() < 1.5 * MICRO);
}
