use collapse_heat::geometry::*;
use proptest::prelude::*;
use std::f64::consts::PI;

fn flat(alpha: f64) -> ConeParams {
    ConeParams::new(alpha, 0.5, 1.0, 0.0).unwrap()
}

#[test]
fn disk_measure() {
    let g = build_cone_chart(flat(1.0), 200, 64, 1e-3).unwrap();
    let want = PI * (1.0 - 1e-6);
    assert!((g.total_measure() - want).abs() / want < 1e-3, "{}", g.total_measure());
}

#[test]
fn cone_measure_scales_with_alpha() {
    for &a in &[0.5, 0.75, 1.5] {
        let g = build_cone_chart(flat(a), 200, 64, 1e-3).unwrap();
        let want = a * PI * (1.0 - 1e-6);
        assert!((g.total_measure() - want).abs() / want < 1e-3, "alpha={a}");
        let cw: f64 = g.cone_weights.iter().sum();
        assert!((cw - g.total_measure()).abs() < 1e-12 * cw);
    }
}

#[test]
fn euclidean_metric_in_polar_chart() {
    let p = flat(1.0);
    for &(r, t) in &[(0.1, 0.0), (0.5, 1.0), (0.9, 4.0)] {
        let g = p.metric(r, t);
        assert!((g[0][0] - 1.0).abs() < 1e-15);
        assert!(g[0][1].abs() < 1e-15 && g[1][0].abs() < 1e-15);
        assert!((g[1][1] - r * r).abs() < 1e-15);
    }
}

#[test]
fn q_perturbation_decays_like_r_beta() {
    let p = ConeParams::new(0.75, 0.5, 2.0, 0.3).unwrap();
    let g = build_cone_chart(p, 20, 16, 0.01).unwrap();
    let ratio = g.measured_q_ratio();
    assert!(ratio <= 0.3 * (1.0 + 1e-12) && ratio > 0.1, "{ratio}");
    for m in &g.metric_coeffs {
        assert!(m[0][0] * m[1][1] - m[0][1] * m[1][0] > 0.0);
    }
}

#[test]
fn invalid_cone_parameters_rejected() {
    assert!(ConeParams::new(0.0, 0.5, 1.0, 0.0).is_err());
    assert!(ConeParams::new(1.0, 1.5, 1.0, 0.0).is_err());
    assert!(ConeParams::new(1.0, 0.5, -1.0, 0.0).is_err());
    assert!(build_fiber_lattice([[1.0, 2.0], [0.5, 1.0]], 1.0).is_err());
    assert!(build_fiber_lattice([[1.0, 0.0], [0.0, 1.0]], 0.0).is_err());
}

#[test]
fn square_torus_spectrum() {
    let l = build_fiber_lattice([[1.0, 0.0], [0.0, 1.0]], 1.0).unwrap();
    let ev = l.spectrum(9);
    let four_pi2 = 4.0 * PI * PI;
    assert!(ev[0].abs() < 1e-14);
    for e in &ev[1..5] {
        assert!((e - four_pi2).abs() < 1e-10);
    }
    for e in &ev[5..9] {
        assert!((e - 2.0 * four_pi2).abs() < 1e-10);
    }
    let half = l.with_scale(0.5);
    assert!((half.lambda1() - 16.0 * PI * PI).abs() < 1e-9);
    assert!((l.diameter() - 0.5f64.sqrt() / 1.0).abs() < 1e-14);
    assert!((l.area() - 1.0).abs() < 1e-15);
}

#[test]
fn skew_lattice_spectrum() {
    // basis columns (1, 0) and (1/2, √3/2): dual vectors have length 2/√3
    let l = build_fiber_lattice([[1.0, 0.5], [0.0, 3f64.sqrt() / 2.0]], 1.0).unwrap();
    let ev = l.spectrum(7);
    let want = 4.0 * PI * PI * 4.0 / 3.0;
    for e in &ev[1..7] {
        assert!((e - want).abs() < 1e-9, "{e} vs {want}");
    }
    assert!(torus_gap_lower_bound(&l) <= l.lambda1());
}

#[test]
fn lattice_json_round_trip() {
    let l = build_fiber_lattice([[1.0, 0.3], [0.1, 0.9]], 0.25).unwrap();
    let back = FiberLattice::from_json(&l.to_json()).unwrap();
    assert_eq!(l, back);
    let g = build_cone_chart(ConeParams::new(0.75, 0.5, 2.0, 0.3).unwrap(), 8, 8, 0.05).unwrap();
    let gb = BaseGrid::from_json(&g.to_json()).unwrap();
    assert_eq!(g.nodes, gb.nodes);
    assert_eq!(g.quad_weights, gb.quad_weights);
}

#[test]
fn exponential_schedule() {
    let s = CollapseSchedule::exponential(&[0.4, 0.2, 0.1], 0.3, 0.5).unwrap();
    assert!(s.epsilon_nonincreasing());
    for st in &s.steps {
        assert!((st.epsilon - 0.3 * (-0.5 / st.s).exp()).abs() < 1e-15);
    }
    assert!(CollapseSchedule::exponential(&[0.2, 0.4], 0.3, 0.5).is_err());
    let c = CollapseSchedule::custom(vec![ScheduleStep { s: 0.4, epsilon: 0.01 }, ScheduleStep { s: 0.2, epsilon: 0.02 }]).unwrap();
    assert!(!c.epsilon_nonincreasing());
    assert!(c.gauge_value(0.3).is_none());
}

#[test]
fn perturbation_deterministic_and_calibrated() {
    let base = build_cone_chart(ConeParams::new(0.75, 0.5, 2.0, 0.3).unwrap(), 8, 8, 0.05).unwrap();
    let lat = build_fiber_lattice([[1.0, 0.0], [0.0, 1.0]], 0.3).unwrap();
    let shape = ProductShape { base: &base, lattice: &lat, n_f: 6 };
    let field = PerturbationField { c1_norm_target: 0.05, profile: PerturbationProfile::default(), seed: 3 };
    let a = sample_perturbation(&shape, &field).unwrap();
    let b = sample_perturbation(&shape, &field).unwrap();
    assert_eq!(a, b);
    assert!((a.measured_c1 - 0.05).abs() < 0.1 * 0.05);
    assert!(a.min_eigenvalue > 0.9);
    let c = sample_perturbation(&shape, &PerturbationField { seed: 4, ..field }).unwrap();
    assert_ne!(a.node_values, c.node_values);
    let z = sample_perturbation(&shape, &PerturbationField::zero()).unwrap();
    assert!(z.node_values.iter().all(|v| v.iter().all(|&x| x == 0.0)));
}

#[test]
fn oversized_perturbation_is_rejected() {
    let base = build_cone_chart(ConeParams::new(0.75, 0.5, 2.0, 0.3).unwrap(), 8, 8, 0.05).unwrap();
    let lat = build_fiber_lattice([[1.0, 0.0], [0.0, 1.0]], 0.3).unwrap();
    let shape = ProductShape { base: &base, lattice: &lat, n_f: 6 };
    let spec = FieldSpec::random(&PerturbationProfile::default(), 1, 2.0).scaled(1e3);
    assert!(sample_with_spec(&shape, spec, 1.0).is_err());
}

proptest! {
    #[test]
    fn gap_bound_below_first_eigenvalue(
        a in 0.2f64..3.0, b in -2.0f64..2.0, c in -2.0f64..2.0, d in 0.2f64..3.0, s in 0.05f64..2.0
    ) {
        let det = a * d - b * c;
        prop_assume!(det.abs() > 0.05);
        let l = build_fiber_lattice([[a, b], [c, d]], s).unwrap();
        let lb = torus_gap_lower_bound(&l);
        prop_assert!(lb <= l.lambda1() * (1.0 + 1e-12), "bound {lb} > lambda1 {}", l.lambda1());
        prop_assert!((l.with_scale(0.5 * s).lambda1() / l.lambda1() - 4.0).abs() < 1e-9);
    }

    #[test]
    fn graded_radial_nodes_increase(k in 1usize..6, h in 0.02f64..0.3, rmin in 0.001f64..0.1) {
        let r = radial_nodes(2.0, RadialSpacing::Graded { rings_per_octave: k, h_out: h }, rmin).unwrap();
        prop_assert!((r[0] - rmin).abs() < 1e-14);
        prop_assert!((r.last().unwrap() - 2.0).abs() < 1e-12);
        prop_assert!(r.windows(2).all(|w| w[1] > w[0]));
    }
}
