//! Property suites for the module invariants.

use proptest::prelude::*;
use spinsqueeze::analysis::{measurement_pairs, squeezing_from_records, MeanSpinConvention};
use spinsqueeze::angular::TwoJ;
use spinsqueeze::atomic::{AtomicSpecies, Line};
use spinsqueeze::config::RunConfig;
use spinsqueeze::dynamics::{spin_coefficients, MomentModel};
use spinsqueeze::geometry::{overlap_c, CloudGeometry, ModeBasis, ModeIndex, OverlapTables, QuadratureSpec, SliceGrid};
use spinsqueeze::oracle::{oracle_colors, AtomSpace, ExactEnsemble, InternalSpace};
use spinsqueeze::probe::{
    cancellation_operating_point, cancellation_residual, effective_measurement_rate, faraday_angle,
    single_color_measurement_strength, tensor_shift_strength, two_color_strength_ratio, ProbeColor, TwoColorProbe,
};
use spinsqueeze::pumping::{qutrit_projected_tables, ColorPumping, PumpingMap, PumpingTables, QutritBasis};
use spinsqueeze::rng::NoiseStream;
use spinsqueeze::trajectories::batch_simulate;

fn cs() -> AtomicSpecies {
    AtomicSpecies::cesium()
}

fn gamma_d2() -> f64 {
    cs().manifold(Line::D2).unwrap().linewidth
}

/// Signed detuning with magnitude in `[lo, hi]` D2 linewidths.
fn detuning(lo: f64, hi: f64) -> impl Strategy<Value = f64> {
    (lo..hi, any::<bool>()).prop_map(|(m, neg)| if neg { -m } else { m } * gamma_d2())
}

fn rmax(s: &AtomicSpecies, c: &ProbeColor) -> f64 {
    single_color_measurement_strength(s, c, 1.0, 1.0).unwrap().1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rank_coefficients_are_finite_and_scalar_part_positive_far_out(d in detuning(300.0, 5000.0)) {
        let s = cs();
        for line in [Line::D1, Line::D2] {
            for k in 0..3 {
                prop_assert!(s.effective_ck(line, k, d).unwrap().is_finite());
            }
            prop_assert!(s.effective_ck(line, 0, d).unwrap() > 0.0);
        }
    }

    #[test]
    fn line_factor_tends_to_one(d in detuning(2000.0, 20000.0)) {
        // first-order approach: |f - 1| ~ 2 δ_hfs / |Δ|
        let f = cs().scattering_line_factor(Line::D2, d).unwrap();
        prop_assert!((f - 1.0).abs() < 300.0 * gamma_d2() / d.abs(), "{f}");
    }

    // (Σ η)² / (Σ s · Σ γ) ≤ max_j η_j²/(s_j γ_j) by Cauchy–Schwarz, so the
    // ratio to the D2 maximum is bounded by the larger single-color maximum.
    #[test]
    fn strength_ratio_is_positive_finite_and_bounded(
        ratio in 0.2f64..5.0, x in 0.01f64..2.0, opposite in any::<bool>(),
    ) {
        let s = cs();
        let d2 = -580.0 * gamma_d2();
        let d1 = if opposite { -ratio * d2 } else { ratio * d2 };
        let Ok(c1) = ProbeColor::new(Line::D1, d1, x, 16e-6) else { return Ok(()) };
        let c2 = ProbeColor::new(Line::D2, d2, 1.0, 16e-6).unwrap();
        let Ok(r) = two_color_strength_ratio(&s, &TwoColorProbe::new(c1, c2).unwrap()) else { return Ok(()) };
        prop_assert!(r.is_finite() && r >= 0.0);
        let bound = (rmax(&s, &c1) / rmax(&s, &c2)).max(1.0);
        prop_assert!(r <= bound * (1.0 + 1e-12), "{r} > {bound}");
    }

    #[test]
    fn cancellation_ratio_zeroes_the_residual(d1 in detuning(600.0, 3000.0)) {
        let s = cs();
        let d2 = -580.0 * gamma_d2();
        if let Ok(x) = cancellation_operating_point(&s, d1, d2) {
            let a = tensor_shift_strength(&s, &ProbeColor::new(Line::D1, d1, x, 16e-6).unwrap(), 1.0).unwrap();
            let b = tensor_shift_strength(&s, &ProbeColor::new(Line::D2, d2, 1.0, 16e-6).unwrap(), 1.0).unwrap();
            prop_assert!(cancellation_residual(a, b) < 1e-12);
        }
    }

    #[test]
    fn measurement_rate_is_nonnegative_and_collapses_for_one_color(
        d1 in detuning(600.0, 3000.0), d2 in detuning(600.0, 3000.0), p1 in 0.0f64..1e-4, p2 in 1e-7f64..1e-4,
    ) {
        let s = cs();
        let c1 = ProbeColor::new(Line::D1, d1, p1, 16e-6).unwrap();
        let c2 = ProbeColor::new(Line::D2, d2, p2, 16e-6).unwrap();
        prop_assert!(effective_measurement_rate(&s, &TwoColorProbe::new(c1, c2).unwrap()).unwrap() >= 0.0);
        let dark = c1.with_power(0.0);
        let k = effective_measurement_rate(&s, &TwoColorProbe::new(dark, c2).unwrap()).unwrap();
        let chi = faraday_angle(&s, &c2).unwrap();
        let direct = chi * chi * c2.photon_flux(&s).unwrap();
        prop_assert!((k / direct - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cloud_number_closed_form(wp in 5e-6f64..100e-6, wz in 50e-6f64..1e-3, n in 1e3f64..1e8) {
        let c = CloudGeometry::with_atom_number(n, wp, wz).unwrap();
        let want = c.peak_density * (std::f64::consts::PI / 2.0).powf(1.5) * wp * wp * wz;
        prop_assert!((c.atom_number() / want - 1.0).abs() < 1e-9);
        prop_assert!((c.atom_number() / n - 1.0).abs() < 1e-9);
    }

    #[test]
    fn config_round_trips(seed in 0..=i64::MAX as u64, n1 in 1e3f64..1e8, traj in 1usize..10_000) {
        let mut cfg = RunConfig::nominal();
        cfg.integration.base_seed = seed;
        cfg.cloud.n1 = n1;
        cfg.integration.n_traj = traj;
        let back = RunConfig::from_toml_str(&cfg.to_toml()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.content_hash(), cfg.content_hash());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fundamental_self_overlap_is_real_positive_and_falls_off_the_waist(z1 in 0.0f64..1.0, z2 in 0.0f64..1.0) {
        let basis = ModeBasis::new(16e-6, 852e-9, 0, 0, SliceGrid::covering(1e-3, 1).unwrap(), QuadratureSpec::default()).unwrap();
        let zr = basis.rayleigh_range();
        let (a, b) = (z1.min(z2) * 3.0 * zr, z1.max(z2) * 3.0 * zr);
        let f = ModeIndex::FUNDAMENTAL;
        let (ca, cb) = (overlap_c(&basis, f, f, a).unwrap(), overlap_c(&basis, f, f, -b).unwrap());
        prop_assert!(ca.im.abs() < 1e-12 && cb.im.abs() < 1e-12);
        prop_assert!(ca.re > 0.0 && cb.re > 0.0);
        prop_assert!(cb.re <= ca.re * (1.0 + 1e-12));
    }

    #[test]
    fn two_color_tables_are_additive(d1 in detuning(600.0, 3000.0), d2 in detuning(600.0, 3000.0), g1 in 0.0f64..5e4, g2 in 0.0f64..5e4) {
        let s = cs();
        let a = ColorPumping::build(&s, Line::D1, d1).unwrap();
        let b = ColorPumping::build(&s, Line::D2, d2).unwrap();
        let summed = PumpingTables::weighted_sum(&[(g1, &a.tables), (g2, &b.tables)]);
        let map: PumpingMap = a.averaged.scaled(g1).add(&b.averaged.scaled(g2));
        let direct = qutrit_projected_tables(&map, &QutritBasis::new(s.f_ground()).unwrap());
        let scale = g1.max(g2).max(1.0);
        for i in 0..3 {
            for j in 0..3 {
                prop_assert!((summed.t_nn[i][j] - direct.t_nn[i][j]).abs() < 1e-12 * scale);
                prop_assert!((summed.t_xx[i][j] - direct.t_xx[i][j]).abs() < 1e-12 * scale);
                prop_assert!((summed.t_nx[i][j] - direct.t_nx[i][j]).abs() < 1e-12 * scale);
                for l in 0..3 {
                    prop_assert!((summed.n_table[i][j][l] - direct.n_table[i][j][l]).abs() < 1e-12 * scale);
                }
            }
            prop_assert!((summed.loss[i] - direct.loss[i]).abs() < 1e-12 * scale);
        }
    }

    #[test]
    fn without_pumping_variance_falls_strictly_and_matches_closed_form(
        betas in prop::collection::vec(0.1f64..1.0, 1..4), r in 0.05f64..5.0,
    ) {
        let spin = spin_coefficients(TwoJ(8)).unwrap();
        let m = MomentModel::new(OverlapTables::point_atoms(&betas), PumpingTables::weighted_sum(&[]), 1.0, spin).unwrap();
        let s0 = m.initial_state();
        let v0 = m.spinwave_moments(&s0).var_fz;
        let t = 1.0;
        let m = m.with_kappa(r / (t * v0));
        let path = m.deterministic_path(&s0, t / 400.0, 400).unwrap();
        prop_assert!(path.moments.windows(2).all(|w| w[1].var_fz < w[0].var_fz));
        let v = path.moments.last().unwrap().var_fz / v0;
        prop_assert!((v * (1.0 + r) - 1.0).abs() < 1e-6, "{v} vs {}", 1.0 / (1.0 + r));
    }

    // decoherence can only hurt: ξ_m² ≥ 1/(1 + κ t ΔF_z²(0))
    #[test]
    fn pumping_keeps_squeezing_above_the_pure_qnd_bound(betas in prop::collection::vec(0.2f64..1.0, 1..4), coupling in 0.5f64..5.0) {
        let s = cs();
        let g = gamma_d2();
        let d2 = ColorPumping::build(&s, Line::D2, -580.0 * g).unwrap();
        let gamma = 2.857e4;
        let rates = PumpingTables::weighted_sum(&[(gamma, &d2.tables)]);
        let spin = spin_coefficients(s.f_ground()).unwrap();
        let m = MomentModel::new(OverlapTables::point_atoms(&betas), rates, 1.0, spin).unwrap();
        let s0 = m.initial_state();
        let v0 = m.spinwave_moments(&s0).var_fz;
        let t_end = 2.0 / gamma;
        let m = m.with_kappa(coupling / (t_end * v0));
        let path = m.deterministic_path(&s0, t_end / 400.0, 400).unwrap();
        let xi = path.squeezing(4.0, m.n1(), m.n2()).unwrap();
        for (i, x) in xi.iter().enumerate() {
            prop_assert!(path.moments[i].var_fz > 0.0);
            let bound = 1.0 / (1.0 + m.kappa * path.times[i] * v0);
            prop_assert!(*x >= bound * (1.0 - 1e-9), "t = {}: {x} < {bound}", path.times[i]);
        }
    }

    #[test]
    fn squeezing_estimate_is_scale_invariant(scale in 1e-3f64..1e3, seed in 0u64..1000) {
        let spin = spin_coefficients(TwoJ(8)).unwrap();
        let m = MomentModel::new(OverlapTables::point_atoms(&[1.0]), PumpingTables::weighted_sum(&[]), 2.0, spin).unwrap();
        let batch = batch_simulate(&m, &m.initial_state(), 0.2, 1e-3, 60, seed, "p").unwrap();
        let mut scaled: Vec<_> = batch.ok_records().cloned().collect();
        for r in &mut scaled {
            r.dm.iter_mut().for_each(|x| *x *= scale);
        }
        let (sn, pn) = (0.05, 0.02);
        let a = squeezing_from_records(&measurement_pairs(batch.ok_records(), 0.1).unwrap(), sn, pn, 0.9, MeanSpinConvention::Divide).unwrap();
        let b = squeezing_from_records(&measurement_pairs(&scaled, 0.1).unwrap(), sn * scale * scale, pn * scale * scale, 0.9, MeanSpinConvention::Divide).unwrap();
        prop_assert!((a / b - 1.0).abs() < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn exact_engine_trace_falls_and_state_stays_physical(seed in 0u64..1_000, b2 in 0.2f64..1.0, kappa in 1e2f64..1e4) {
        let s = cs();
        let g = gamma_d2();
        let probe = TwoColorProbe::new(
            ProbeColor::new(Line::D1, 546.0 * g, 1.8e-6, 16e-6).unwrap(),
            ProbeColor::new(Line::D2, -580.0 * g, 8.3e-6, 16e-6).unwrap(),
        ).unwrap();
        let colors = oracle_colors(&s, &probe).unwrap();
        let maps: Vec<(f64, &PumpingMap)> = colors.iter().map(|c| (c.gamma, &c.pumping.averaged)).collect();
        let atom = AtomSpace::new(&s, &maps, InternalSpace::Qutrit).unwrap();
        let dt = 2e-7;
        // unconditioned pumping only moves population into the sinks
        let mut free = ExactEnsemble::new(atom.clone(), &[1.0, b2], 0.0, dt).unwrap();
        let mut sinks = free.sink_populations();
        for _ in 0..100 {
            free.step(0.0).unwrap();
            let now = free.sink_populations();
            prop_assert!(now.iter().zip(&sinks).all(|(a, b)| *a >= b - 1e-14));
            sinks = now;
        }
        let mut e = ExactEnsemble::new(atom, &[1.0, b2], kappa, dt).unwrap();
        let mut noise = NoiseStream::new(seed, 0);
        for _ in 0..200 {
            e.step(noise.wiener(dt)).unwrap();
        }
        let rho = e.density_matrix();
        prop_assert!((&rho - rho.adjoint()).norm() < 1e-12);
        prop_assert!((e.trace() - 1.0).abs() < 1e-12);
        e.check_positive(-1e-10).unwrap();
    }
}
