use collapse_heat::assembly::{assemble_base, assemble_interval, Bc, DiscreteOperator};
use collapse_heat::geometry::{build_cartesian_patch, build_cone_chart, ConeParams};
use collapse_heat::heat::*;
use collapse_heat::linalg::{sub, wdot, wnorm};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::sync::Arc;

fn cone_op(bc: Bc) -> Arc<DiscreteOperator> {
    let g = build_cone_chart(ConeParams::new(0.75, 0.5, 2.0, 0.3).unwrap(), 12, 12, 0.05).unwrap();
    Arc::new(assemble_base(&g, bc).unwrap())
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn rel(a: &[f64], b: &[f64], m: &[f64]) -> f64 {
    wnorm(m, &sub(a, b)) / wnorm(m, b).max(1e-300)
}

#[test]
fn contraction_and_energy_decay() {
    let op = cone_op(Bc::Dirichlet);
    let e = build_engine(op.clone(), EngineMode::DenseSpectral).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v = random_vec(&mut rng, e.dim());
    let mut prev_norm = wnorm(e.mass(), &v);
    let mut prev_energy = op.stiffness.quad_form(&v);
    for &t in &[0.001, 0.01, 0.1, 1.0] {
        let w = e.apply(t, &v).unwrap();
        let n = wnorm(e.mass(), &w);
        let en = op.stiffness.quad_form(&w);
        assert!(n <= prev_norm * (1.0 + 1e-12));
        assert!(en <= prev_energy * (1.0 + 1e-12));
        prev_norm = n;
        prev_energy = en;
    }
}

#[test]
fn positivity_preserved() {
    for bc in [Bc::Dirichlet, Bc::Neumann] {
        let e = build_engine(cone_op(bc), EngineMode::DenseSpectral).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v: Vec<f64> = (0..e.dim()).map(|_| rng.random_range(0.0..1.0)).collect();
        let w = e.apply(0.05, &v).unwrap();
        assert!(w.iter().all(|&x| x >= -1e-12));
    }
}

#[test]
fn eigenvectors_decay_exponentially() {
    let e = build_engine(Arc::new(assemble_interval(40, 1.0, Bc::Dirichlet).unwrap()), EngineMode::DenseSpectral).unwrap();
    let sp = e.spectral.as_ref().unwrap();
    for k in [0usize, 3, 10] {
        let v: Vec<f64> = (0..e.dim()).map(|i| sp.vectors[(i, k)]).collect();
        let w = e.apply(0.01, &v).unwrap();
        let f = (-0.01 * sp.eigenvalues[k]).exp();
        let want: Vec<f64> = v.iter().map(|x| f * x).collect();
        let err = wnorm(e.mass(), &sub(&w, &want)) / wnorm(e.mass(), &v);
        assert!(err < 1e-12, "k={k}");
    }
    // lowest Dirichlet mode of the unit interval
    assert!((sp.eigenvalues[0] - PI * PI).abs() / (PI * PI) < 1e-3);
}

#[test]
fn chapman_kolmogorov() {
    for mode in [EngineMode::DenseSpectral, EngineMode::Krylov] {
        let e = build_engine(cone_op(Bc::Dirichlet), mode).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random_vec(&mut rng, e.dim());
        let a = e.apply(0.03, &e.apply(0.02, &v).unwrap()).unwrap();
        let b = e.apply(0.05, &v).unwrap();
        assert!(rel(&a, &b, e.mass()) < 1e-8, "{mode:?}");
    }
}

#[test]
fn dense_and_krylov_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut cases = 0;
    for bc in [Bc::Dirichlet, Bc::Neumann] {
        let op = cone_op(bc);
        let d = build_engine(op.clone(), EngineMode::DenseSpectral).unwrap();
        let si = build_engine(op.clone(), EngineMode::Krylov).unwrap();
        let po = build_engine_with(op.clone(), EngineMode::Krylov, DEFAULT_DENSE_CAP, KrylovParams::polynomial()).unwrap();
        for &t in &[0.005, 0.02, 0.1, 0.4, 1.0] {
            let v = random_vec(&mut rng, d.dim());
            let want = d.apply(t, &v).unwrap();
            assert!(rel(&si.apply(t, &v).unwrap(), &want, d.mass()) < 1e-7, "shift-invert {bc:?} t={t}");
            assert!(rel(&po.apply(t, &v).unwrap(), &want, d.mass()) < 1e-7, "polynomial {bc:?} t={t}");
            cases += 2;
        }
    }
    assert_eq!(cases, 20);
}

#[test]
fn apply_multi_matches_apply() {
    let e = build_engine(cone_op(Bc::Dirichlet), EngineMode::Krylov).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let v = random_vec(&mut rng, e.dim());
    let taus = [0.01, 0.05, 0.2];
    let multi = e.apply_multi(&taus, &v).unwrap();
    for (t, w) in taus.iter().zip(&multi) {
        assert!(rel(w, &e.apply(*t, &v).unwrap(), e.mass()) < 1e-8);
    }
}

#[test]
fn small_time_continuity() {
    let e = build_engine(cone_op(Bc::Neumann), EngineMode::DenseSpectral).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let v = random_vec(&mut rng, e.dim());
    let mut last = f64::INFINITY;
    for &t in &[1e-2, 1e-3, 1e-4, 1e-5] {
        let d = rel(&e.apply(t, &v).unwrap(), &v, e.mass());
        assert!(d < last);
        last = d;
    }
    assert!(last < 0.05);
}

#[test]
fn kernel_matrix_properties() {
    for bc in [Bc::Dirichlet, Bc::Neumann] {
        let e = build_engine(cone_op(bc), EngineMode::DenseSpectral).unwrap();
        let k = e.kernel_matrix(0.1).unwrap();
        let c = k.check(e.mass());
        assert!(c.symmetry < 1e-10);
        assert!(c.min_entry > -1e-10);
        match bc {
            Bc::Neumann => assert!(c.max_row_mass_sum_dev < 1e-8),
            Bc::Dirichlet => assert!(c.max_row_mass_sum < 1.0 + 1e-8),
        }
        // K applied to v agrees with the semigroup
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = random_vec(&mut rng, e.dim());
        let mv: Vec<f64> = (0..e.dim()).map(|i| (0..e.dim()).map(|j| k.get(i, j) * e.mass()[j] * v[j]).sum()).collect();
        assert!(rel(&mv, &e.apply(0.1, &v).unwrap(), e.mass()) < 1e-10);
    }
    let dir = tempfile::tempdir().unwrap();
    let e = build_engine(cone_op(Bc::Dirichlet), EngineMode::DenseSpectral).unwrap();
    e.kernel_matrix(0.1).unwrap().export(dir.path(), "k").unwrap();
    assert!(std::fs::read_dir(dir.path()).unwrap().count() >= 1);
    let kry = build_engine(cone_op(Bc::Dirichlet), EngineMode::Krylov).unwrap();
    assert!(kry.kernel_matrix(0.1).is_err() || kry.spectral.is_none());
}

#[test]
fn offdiagonal_profile_is_gaussian() {
    let n = 31;
    let g = build_cartesian_patch(1.0, 1.0, n, n).unwrap();
    let op = Arc::new(assemble_base(&g, Bc::Neumann).unwrap());
    let e = build_engine(op.clone(), EngineMode::DenseSpectral).unwrap();
    // √τ spans several cells
    let tau = 0.02;
    let k = e.kernel_matrix(tau).unwrap();
    let pts: Vec<[f64; 2]> = op.labels.iter().map(|&i| g.nodes[i]).collect();
    let dist = |i: usize, j: usize| ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt();
    let prof = offdiagonal_profile(&k, dist, 16);
    assert_eq!(prof.argmax_bin, 0);
    assert!(prof.gaussian_slope > 0.7 && prof.gaussian_slope < 1.3, "slope {}", prof.gaussian_slope);
    assert!(prof.to_csv().lines().count() == 17);
}

#[test]
fn dense_cap_and_bad_parameters() {
    let op = cone_op(Bc::Dirichlet);
    assert!(build_engine_with(op.clone(), EngineMode::DenseSpectral, 10, KrylovParams::default()).is_err());
    let bad = KrylovParams { max_dim: 1, ..KrylovParams::default() };
    assert!(build_engine_with(op.clone(), EngineMode::Krylov, DEFAULT_DENSE_CAP, bad).is_err());
    let bad = KrylovParams { kind: KrylovKind::ShiftInvert { gamma: 0.0 }, ..KrylovParams::default() };
    assert!(build_engine_with(op, EngineMode::Krylov, DEFAULT_DENSE_CAP, bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn smoothing_bound(seed in 0u64..10_000, log_sigma in -3.0f64..0.0) {
        let sigma = 10f64.powf(log_sigma);
        let e = build_engine(cone_op(Bc::Dirichlet), EngineMode::DenseSpectral).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_vec(&mut rng, e.dim());
        let ratio = smoothed_energy(&e, sigma, &v).unwrap() * sigma / wdot(e.mass(), &v, &v);
        prop_assert!(ratio <= 1.0 / (2.0 * std::f64::consts::E) + 1e-6);
    }
}
