use std::sync::Arc;

use ndarray::Array2;
use proptest::prelude::*;

use tweezer_core::constants::MICRO;
use tweezer_core::dynamics::{evolve, sample_thermal, AtomEnsemble, SimulationConfig, ThermalDistribution};
use tweezer_core::imaging::{render_fluorescence, DetectionModel, LightSheet};
use tweezer_core::patterns::{
    compose, dither, rasterize_primitive, ComposeMode, DeviceGeometry, DitherMethod, FrameSequence, MirrorPattern,
    ShapeSpec, TargetIntensityMap,
};
use tweezer_core::potential::{
    depth_from_microkelvin, dipole_energy, AtomSpecies, AxialStandingWave, HarmonicWell, Potential, PotentialSchedule,
    TrapParameters,
};
use tweezer_core::transport::{hungarian, rearrange_assign};
use tweezer_core::Vec3;

fn block_counts(p: &MirrorPattern) -> Array2<usize> {
    let (rows, cols) = p.dim();
    let mut out = Array2::zeros((rows.div_ceil(4), cols.div_ceil(4)));
    for ((r, c), &on) in p.cells().indexed_iter() {
        out[[r / 4, c / 4]] += on as usize;
    }
    out
}

fn brute_force_cost(cost: &[Vec<f64>]) -> f64 {
    fn rec(cost: &[Vec<f64>], row: usize, used: &mut [bool]) -> f64 {
        if row == cost.len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                best = best.min(cost[row][j] + rec(cost, row + 1, used));
                used[j] = false;
            }
        }
        best
    }
    rec(cost, 0, &mut vec![false; cost[0].len()])
}

fn point() -> impl Strategy<Value = [f64; 2]> {
    [-30.0..30.0f64, -30.0..30.0f64]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dither_round_trip(v in 0.0..=1.0f64) {
        let g = DeviceGeometry::new(16, 24);
        let p = dither(&TargetIntensityMap::constant(g, v).unwrap(), DitherMethod::Ordered);
        for &n in block_counts(&p).iter() {
            prop_assert!((n as f64 / 16.0 - v).abs() <= 1.0 / 32.0 + 1e-12);
        }
    }

    #[test]
    fn ordered_dither_is_monotone(
        base in proptest::collection::vec(0.0..=1.0f64, 16 * 16),
        extra in proptest::collection::vec(0.0..=0.5f64, 16 * 16),
    ) {
        let g = DeviceGeometry::new(16, 16);
        let b = Array2::from_shape_vec((16, 16), base).unwrap();
        let a = Array2::from_shape_fn((16, 16), |(r, c)| (b[[r, c]] + extra[r * 16 + c]).min(1.0));
        let pa = dither(&TargetIntensityMap::from_grid(g, a, None).unwrap(), DitherMethod::Ordered);
        let pb = dither(&TargetIntensityMap::from_grid(g, b, None).unwrap(), DitherMethod::Ordered);
        for (na, nb) in block_counts(&pa).iter().zip(block_counts(&pb).iter()) {
            prop_assert!(na >= nb);
        }
    }

    #[test]
    fn union_rasterizes_as_composition(
        c1 in point(), r1 in 1.0..8.0f64,
        c2 in point(), r2 in 1.0..8.0f64,
        line_end in point(),
    ) {
        let g = DeviceGeometry::new(400, 400);
        let parts = vec![
            ShapeSpec::disk(c1, r1),
            ShapeSpec::Annulus { center_um: c2, inner_radius_um: r2, outer_radius_um: r2 + 2.0 },
            ShapeSpec::Line { start_um: c1, end_um: line_end, count: 4, radius_um: 1.0 },
            ShapeSpec::Star { center_um: c2, points: 5, outer_radius_um: 6.0, inner_radius_um: 2.5, rotation_rad: r1 },
        ];
        let union = rasterize_primitive(&ShapeSpec::Union { members: parts.clone() }, &g).unwrap();
        let maps: Vec<TargetIntensityMap> = parts.iter().map(|s| rasterize_primitive(s, &g).unwrap()).collect();
        let refs: Vec<&TargetIntensityMap> = maps.iter().collect();
        let composed = compose(&refs, ComposeMode::Max).unwrap();
        prop_assert_eq!(union.grid(), composed.grid());
    }

    #[test]
    fn frame_rate_range(rate in 0.0..40e3f64) {
        let g = DeviceGeometry::new(4, 4);
        let r = FrameSequence::new(vec![Arc::new(MirrorPattern::all_off(g))], rate);
        prop_assert_eq!(r.is_ok(), (4e3..=20e3).contains(&rate));
    }

    #[test]
    fn dipole_sign_and_scaling(i in 1.0..1e8f64, k in 1.0..10.0f64, nm in 700.0..900.0f64) {
        let s = AtomSpecies::rubidium87();
        let params = TrapParameters::from_wavelengths(nm * 1e-9, s.transition_wavelength);
        prop_assume!((nm * 1e-9 - s.transition_wavelength).abs() > 0.1e-9);
        let u = dipole_energy(i, &s, &params).unwrap();
        // Red of the transition attracts, blue repels.
        prop_assert_eq!(u < 0.0, nm * 1e-9 > s.transition_wavelength);
        let u_k = dipole_energy(k * i, &s, &params).unwrap();
        prop_assert!((u_k / u - k).abs() < 1e-9 * k);
        let far = TrapParameters { detuning: k * params.detuning, ..params };
        let u_far = dipole_energy(i, &s, &far).unwrap();
        prop_assert!((u / u_far - k).abs() < 1e-9 * k);
    }

    #[test]
    fn force_matches_energy_gradient(
        x in -20.0..20.0f64, y in -5.0..5.0f64, z in -1.0..1.0f64,
        angle in 0.0..std::f64::consts::PI,
    ) {
        let u0 = depth_from_microkelvin(100.0);
        let well = HarmonicWell {
            center: [1.0 * MICRO, -0.5 * MICRO],
            half_width_along: 26.0 * MICRO,
            half_width_across: 6.0 * MICRO,
            angle,
            depth: u0,
            clamped: false,
        };
        let sw = AxialStandingWave {
            inner: Arc::new(well),
            visibility: 0.8,
            period: 392.5e-9,
            antinode: 0.0,
            depth: u0,
        };
        let p = Vec3::new(x, y, z) * MICRO;
        for pot in [&well as &dyn Potential, &sw] {
            let f = pot.force(&p).unwrap();
            let h = 1e-10;
            let mut fd = Vec3::zeros();
            for a in 0..3 {
                let mut hi = p;
                let mut lo = p;
                hi[a] += h;
                lo[a] -= h;
                fd[a] = -(pot.energy(&hi).unwrap() - pot.energy(&lo).unwrap()) / (2.0 * h);
            }
            let scale = f.norm().max(u0 / (26.0 * MICRO) * 1e-3);
            prop_assert!((f - fd).norm() <= 1e-3 * scale, "{f:?} vs {fd:?}");
        }
    }

    #[test]
    fn hungarian_matches_brute_force(
        rows in 1usize..=5,
        extra in 0usize..=2,
        values in proptest::collection::vec(0.0..100.0f64, 49),
    ) {
        let cols = rows + extra;
        let cost: Vec<Vec<f64>> = (0..rows).map(|r| (0..cols).map(|c| values[r * 7 + c]).collect()).collect();
        let cols_of = hungarian(&cost);
        let mut seen = vec![false; cols];
        for &c in &cols_of {
            prop_assert!(!seen[c]);
            seen[c] = true;
        }
        let got: f64 = cols_of.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
        prop_assert!((got - brute_force_cost(&cost)).abs() < 1e-9);
    }

    #[test]
    fn assignment_is_never_worse_than_identity(
        pts in proptest::collection::vec(point(), 1..6),
        shift in point(),
    ) {
        let targets: Vec<[f64; 2]> = pts.iter().map(|p| [p[0] + shift[0] * 0.1, p[1] + shift[1] * 0.1]).collect();
        let a = rearrange_assign(&pts, &targets).unwrap();
        let identity: f64 = pts.iter().zip(&targets).map(|(s, t)| (s[0] - t[0]).powi(2) + (s[1] - t[1]).powi(2)).sum();
        prop_assert!(a.total_cost <= identity + 1e-9);
    }

    #[test]
    fn atoms_outside_sheet_are_dark(z in 4.86e-6..50e-6f64, sign in prop::bool::ANY, seed in 0u64..1000) {
        let z = if sign { z } else { -z };
        let s = AtomSpecies::rubidium87();
        let e = AtomEnsemble::from_parts(vec![Vec3::new(0.0, 0.0, z); 5], vec![Vec3::zeros(); 5], s, 0).unwrap();
        let im = render_fluorescence(&e, &LightSheet::default(), &DetectionModel::default(), seed).unwrap();
        prop_assert_eq!(im.total(), 0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn identical_seeds_give_identical_records(seed in any::<u64>()) {
        let s = AtomSpecies::rubidium87();
        let well = HarmonicWell::round([0.0, 0.0], 6e-6, depth_from_microkelvin(100.0));
        let dist = ThermalDistribution::InTrap {
            potential: Arc::new(well),
            center: Vec3::zeros(),
            half_extent: Vec3::new(6e-6, 6e-6, 0.0),
        };
        let run = || {
            let mut e = sample_thermal(50, 60e-6, &dist, &s, seed).unwrap();
            let mut cfg = SimulationConfig::new(PotentialSchedule::constant(Arc::new(well)), 300e-6);
            cfg.snapshot_times = vec![150e-6];
            let rec = evolve(&mut e, &cfg).unwrap();
            (rec.times, rec.center_of_mass, rec.n_alive, rec.snapshots[0].positions.clone())
        };
        prop_assert_eq!(run(), run());
    }
}
