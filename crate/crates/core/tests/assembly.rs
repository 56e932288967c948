use collapse_heat::assembly::*;
use collapse_heat::geometry::*;
use collapse_heat::heat::{build_engine, EngineMode};
use collapse_heat::linalg::{dot, wdot};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::sync::Arc;

fn eigenvalues(op: &DiscreteOperator) -> Vec<f64> {
    let e = build_engine(Arc::new(op.clone()), EngineMode::DenseSpectral).unwrap();
    e.eigenvalues().unwrap().to_vec()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn interval_matches_stencil_formula() {
    for &n in &[9usize, 17, 33] {
        let h = 1.0 / (n - 1) as f64;
        let d = eigenvalues(&assemble_interval(n, 1.0, Bc::Dirichlet).unwrap());
        assert_eq!(d.len(), n - 2);
        for (k, ev) in d.iter().enumerate() {
            let want = 2.0 / (h * h) * (1.0 - ((k + 1) as f64 * PI * h).cos());
            assert!((ev - want).abs() < 1e-10 * want, "n={n} k={k}");
        }
        let nm = eigenvalues(&assemble_interval(n, 1.0, Bc::Neumann).unwrap());
        assert!(nm[0].abs() < 1e-10);
        for (k, ev) in nm.iter().enumerate().skip(1) {
            let want = 2.0 / (h * h) * (1.0 - (k as f64 * PI * h).cos());
            assert!((ev - want).abs() < 1e-10 * want, "neumann n={n} k={k}");
        }
    }
}

#[test]
fn interval_converges_at_second_order() {
    let err = |n: usize| {
        let d = eigenvalues(&assemble_interval(n, 1.0, Bc::Dirichlet).unwrap());
        (d[0] - PI * PI).abs()
    };
    let (e1, e2) = (err(17), err(33));
    let order = (e1 / e2).log2();
    assert!((order - 2.0).abs() < 0.1, "order {order}");
}

#[test]
fn fiber_first_eigenvalue() {
    let l = build_fiber_lattice([[1.0, 0.0], [0.0, 1.0]], 1.0).unwrap();
    let n = 32;
    let ev = eigenvalues(&assemble_fiber(&l, n).unwrap());
    let hf = 1.0 / n as f64;
    let stencil = 2.0 / (hf * hf) * (1.0 - (2.0 * PI * hf).cos());
    assert!(ev[0].abs() < 1e-9);
    assert!((ev[1] - stencil).abs() < 1e-10 * stencil);
    assert!((ev[1] - l.lambda1()).abs() / l.lambda1() < 0.01);
    let half = eigenvalues(&assemble_fiber(&l.with_scale(0.5), n).unwrap());
    assert!((half[1] / ev[1] - 4.0).abs() < 1e-10);
    let total: f64 = assemble_fiber(&l.with_scale(0.5), n).unwrap().mass.iter().sum();
    assert!((total - 0.25).abs() < 1e-14);
}

#[test]
fn cartesian_patch_dirichlet_eigenvalue() {
    let g = build_cartesian_patch(1.0, 2.0, 21, 41).unwrap();
    let op = assemble_base(&g, Bc::Dirichlet).unwrap();
    let ev = eigenvalues(&op);
    let want = PI * PI * (1.0 + 0.25);
    assert!((ev[0] - want).abs() / want < 5e-3, "{} vs {want}", ev[0]);
}

#[test]
fn neumann_constants_in_kernel() {
    let g = build_cone_chart(ConeParams::new(0.75, 0.5, 2.0, 0.3).unwrap(), 10, 12, 0.05).unwrap();
    let op = assemble_base(&g, Bc::Neumann).unwrap();
    let one = vec![1.0; op.dim];
    assert!(op.stiffness.matvec(&one).iter().all(|x| x.abs() < 1e-11));
    let rep = op.validate().unwrap();
    assert!(rep.symmetry_defect < 1e-13);
    assert!(rep.min_mass > 0.0);
}

fn small_model(eps: f64, bc: Bc, seed: u64) -> FibrationModel {
    let g = build_cone_chart(ConeParams::new(0.75, 0.5, 2.0, 0.3).unwrap(), 8, 8, 0.05).unwrap();
    let l = build_fiber_lattice([[1.0, 0.0], [0.0, 1.0]], 0.3).unwrap();
    let field = PerturbationField { c1_norm_target: eps, profile: PerturbationProfile::default(), seed };
    assemble_total(&g, &l, 6, &field, bc).unwrap()
}

#[test]
fn product_form_at_zero_perturbation() {
    let grids = [
        build_cone_chart(ConeParams::new(0.75, 0.5, 2.0, 0.3).unwrap(), 6, 8, 0.05).unwrap(),
        build_cone_chart(ConeParams::new(1.0, 0.5, 1.0, 0.0).unwrap(), 5, 6, 0.1).unwrap(),
        build_cartesian_patch(1.0, 1.0, 6, 6).unwrap(),
    ];
    let lats = [
        build_fiber_lattice([[1.0, 0.0], [0.0, 1.0]], 0.2).unwrap(),
        build_fiber_lattice([[1.0, 0.5], [0.0, 0.8]], 0.1).unwrap(),
    ];
    let mut count = 0;
    for g in &grids {
        for l in &lats {
            for bc in [Bc::Dirichlet, Bc::Neumann] {
                if count >= 5 {
                    break;
                }
                let m = assemble_total(g, l, 6, &PerturbationField::zero(), bc).unwrap();
                let k = kronecker_sum(&m.base_op, &m.fiber_op);
                let d = m.total_op.stiffness.max_abs_diff(&k);
                assert!(d <= 1e-12 * k.max_abs(), "combo {count}: {d:e}");
                assert!(m.disint.density_deviation() < 1e-12);
                count += 1;
            }
        }
    }
    assert_eq!(count, 5);
}

#[test]
fn disintegration_normalized_under_perturbation() {
    for seed in 0..3 {
        let m = small_model(0.05, Bc::Dirichlet, seed);
        assert!(m.disint.normalization_defect() < 1e-12);
        assert!(m.disint.density_deviation() > 0.0);
        assert!(m.total_op.validate().unwrap().symmetry_defect < 1e-13);
        assert!((m.epsilon - 0.05).abs() < 0.005);
    }
}

#[test]
fn green_identity() {
    let m = small_model(0.05, Bc::Neumann, 1);
    let op = &m.total_op;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let v = random_vec(&mut rng, op.dim);
        let w = random_vec(&mut rng, op.dim);
        let a = wdot(&op.mass, &w, &op.apply_generator(&v));
        let b = dot(&w, &op.stiffness.matvec(&v));
        let c = wdot(&op.mass, &v, &op.apply_generator(&w));
        assert!((a - b).abs() < 1e-10 * b.abs().max(1.0));
        assert!((a - c).abs() < 1e-10 * a.abs().max(1.0));
    }
}

#[test]
fn vertical_energy_vanishes_on_lifts() {
    let m = small_model(0.05, Bc::Dirichlet, 2);
    let nfib = m.n_fiber();
    let u: Vec<f64> = (0..m.total_dim()).map(|x| (x / nfib) as f64).collect();
    assert!(vertical_energy(&m, &u).unwrap().abs() < 1e-9);
    assert!(vertical_energy(&m, &[1.0]).is_err());
}

#[test]
fn dimension_guard() {
    let g = build_cone_chart(ConeParams::new(0.75, 0.5, 2.0, 0.3).unwrap(), 8, 8, 0.05).unwrap();
    let l = build_fiber_lattice([[1.0, 0.0], [0.0, 1.0]], 0.3).unwrap();
    let r = assemble_total_with(&g, &l, 6, &PerturbationField::zero(), Bc::Dirichlet, &AssemblyOptions { max_dim: 100 });
    assert!(r.is_err());
    assert!(assemble_fiber(&l, 3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn energy_is_quadratic_and_nonnegative(c in -5.0f64..5.0, seed in 0u64..1000) {
        let g = build_cone_chart(ConeParams::new(0.75, 0.5, 2.0, 0.3).unwrap(), 8, 8, 0.05).unwrap();
        let op = assemble_base(&g, Bc::Dirichlet).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_vec(&mut rng, op.dim);
        let cv: Vec<f64> = v.iter().map(|x| c * x).collect();
        let e = dirichlet_energy(&op, &v).unwrap();
        prop_assert!(e > 0.0);
        prop_assert!((dirichlet_energy(&op, &cv).unwrap() - c * c * e).abs() <= 1e-12 * e.max(1.0) * (1.0 + c * c));
    }
}
