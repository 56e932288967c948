use collapse_heat::assembly::{assemble_base, Bc};
use collapse_heat::cone::ConeKernelParams;
use collapse_heat::geometry::{build_cone_chart, BaseGrid, ConeParams};
use collapse_heat::heat::{build_engine, EngineMode, HeatEngine};
use collapse_heat::renorm::*;
use proptest::prelude::*;
use std::sync::{Arc, OnceLock};

fn rhos() -> Vec<f64> {
    default_rhos(2.0, 6)
}

#[test]
fn synthetic_power_law_is_extrapolated() {
    let r = rhos();
    let v: Vec<f64> = r.iter().map(|x| 1.0 + x.powf(4.5)).collect();
    let ex = extrapolate_ren(&r, &v, 0.5, 0.0).unwrap();
    assert!((ex.limit - 1.0).abs() < 1e-6, "{}", ex.limit);
    assert!((ex.rate - 4.5).abs() < 0.1, "{}", ex.rate);
    assert!(!ex.flags.slow_rate && !ex.flags.noisy && !ex.flags.indeterminate);
    assert!((ex.expected_rate - 4.5).abs() < 1e-15);
}

#[test]
fn slow_rate_is_flagged() {
    let r = rhos();
    let v: Vec<f64> = r.iter().map(|x| 2.0 - 0.3 * x * x).collect();
    let ex = extrapolate_ren(&r, &v, 0.5, 0.0).unwrap();
    assert!(ex.flags.slow_rate);
    assert!((ex.rate - 2.0).abs() < 1e-6);
    assert!((ex.limit - 2.0).abs() < 1e-10);
}

#[test]
fn constant_input_is_indeterminate() {
    let r = rhos();
    let ex = extrapolate_ren(&r, &[3.0; 6], 0.5, 0.0).unwrap();
    assert!(ex.flags.indeterminate);
    assert_eq!(ex.limit, 3.0);
}

#[test]
fn noisy_input_is_flagged() {
    let r = rhos();
    let v = [1.0, 1.01, 0.99, 1.03, 0.96, 1.05];
    let ex = extrapolate_ren(&r, &v, 0.5, 0.0).unwrap();
    assert!(ex.flags.noisy);
    assert!(ex.err >= 0.09);
}

#[test]
fn floor_excludes_small_differences() {
    let r = rhos();
    let v: Vec<f64> = r.iter().map(|x| 1.0 + x.powf(4.5)).collect();
    let ex = extrapolate_ren(&r, &v, 0.5, 1e-6).unwrap();
    assert!(ex.flags.floor_reached);
    assert!(ex.err >= 1e-6);
    assert!((ex.limit - 1.0).abs() <= ex.err);
}

#[test]
fn bad_sequences_rejected() {
    assert!(extrapolate_ren(&[0.5, 0.25, 0.125], &[1.0, 1.0, 1.0], 0.5, 0.0).is_err());
    assert!(extrapolate_ren(&[0.5, 0.25, 0.1, 0.05], &[1.0; 4], 0.5, 0.0).is_err());
    assert!(extrapolate_ren(&rhos(), &[1.0, 1.0, f64::NAN, 1.0, 1.0, 1.0], 0.5, 0.0).is_err());
    assert!(CutoffProfile::smoothstep(2).is_err());
}

struct Fixture {
    grid: BaseGrid,
    engine: HeatEngine,
    phi: Vec<f64>,
    psi: Vec<f64>,
    chi: Vec<f64>,
}

fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let grid = build_cone_chart(ConeParams::new(0.75, 0.5, 2.0, 0.3).unwrap(), 24, 12, 0.01).unwrap();
        let engine = build_engine(Arc::new(assemble_base(&grid, Bc::Dirichlet).unwrap()), EngineMode::DenseSpectral).unwrap();
        let phi: Vec<f64> = grid.nodes.iter().map(|p| (1.0 - (p[0] / 2.0).powi(2)).max(0.0)).collect();
        let psi: Vec<f64> = grid.nodes.iter().map(|p| (1.0 - (p[0] / 1.5).powi(2)).max(0.0) * (1.0 + 0.5 * p[1].cos())).collect();
        let chi = ChiCutoff::new(0.5).values(&grid);
        Fixture { grid, engine, phi, psi, chi }
    })
}

fn setup<'a>(f: &'a Fixture, phi: &'a [f64], psi: &'a [f64]) -> RenormSetup<'a> {
    RenormSetup {
        engine: &f.engine,
        cone: ConeKernelParams::new(0.75),
        grid: &f.grid,
        phi,
        psi,
        tau: 0.1,
        profile: CutoffProfile::default(),
        chi: &f.chi,
    }
}

#[test]
fn split_partitions_and_localizes() {
    let f = fixture();
    for &rho in &[0.5, 0.125] {
        let sp = split_test_function(&f.phi, &f.grid, &CutoffProfile::default(), rho).unwrap();
        for (k, p) in f.grid.nodes.iter().enumerate() {
            assert!((sp.outer[k] + sp.inner[k] - f.phi[k]).abs() < 1e-15);
            if p[0] >= rho {
                assert_eq!(sp.inner[k], 0.0);
            }
            if p[0] <= 0.5 * rho {
                assert_eq!(sp.outer[k], 0.0);
            }
        }
        assert!(sp.inner_l2 <= sp.l2_constant * rho * sp.sup_norm * (1.0 + 1e-12));
    }
    assert!(split_test_function(&f.phi, &f.grid, &CutoffProfile::default(), 0.015).is_err());
    assert!(split_test_function(&f.phi, &f.grid, &CutoffProfile::default(), 2.5).is_err());
}

#[test]
fn inner_part_outside_chi_support_is_trivial() {
    let f = fixture();
    // Ψ vanishing on r < 1 has no inner part for ρ ≤ 1
    let psi: Vec<f64> = f.grid.nodes.iter().map(|p| if p[0] > 1.0 { 1.0 } else { 0.0 }).collect();
    let t = rho_renormalized_pairing(&setup(f, &f.phi, &psi), 0.25).unwrap();
    assert_eq!(t.inner, 0.0);
    assert_eq!(t.total, t.outer);
}

#[test]
fn pairing_is_symmetric_and_bilinear() {
    let f = fixture();
    let a = rho_renormalized_pairing(&setup(f, &f.phi, &f.psi), 0.25).unwrap();
    let b = rho_renormalized_pairing(&setup(f, &f.psi, &f.phi), 0.25).unwrap();
    assert!((a.total - b.total).abs() < 1e-12 * a.total.abs());
    let comb: Vec<f64> = f.phi.iter().zip(&f.psi).map(|(x, y)| 2.0 * x - 0.5 * y).collect();
    let c = rho_renormalized_pairing(&setup(f, &comb, &f.psi), 0.25).unwrap();
    let d = rho_renormalized_pairing(&setup(f, &f.psi, &f.psi), 0.25).unwrap();
    let want = 2.0 * a.total - 0.5 * d.total;
    assert!((c.total - want).abs() < 1e-12 * want.abs().max(a.total.abs()));
}

#[test]
fn decomposition_is_consistent() {
    let f = fixture();
    let s = setup(f, &f.phi, &f.psi);
    let dcmp = renorm_decomposition(&s, 0.25).unwrap();
    let full = base_pairing(&f.engine, &f.phi, &f.psi, 0.1).unwrap();
    assert!((dcmp.full - full).abs() < 1e-12 * full.abs());
    let t = rho_renormalized_pairing(&s, 0.25).unwrap();
    assert!((dcmp.renormalized() - t.total).abs() < 1e-13 * t.total.abs());
    assert!((dcmp.full - dcmp.renormalized() - dcmp.mixed - dcmp.edge()).abs() < 1e-13 * full.abs());
}

#[test]
fn identical_variants_agree() {
    let f = fixture();
    let v = [(CutoffProfile::default(), ChiCutoff::new(0.5)), (CutoffProfile::default(), ChiCutoff::new(0.5))];
    let rep = cutoff_independence_test(&f.engine, ConeKernelParams::new(0.75), &f.grid, &f.phi, &f.psi, 0.1, &v, &rhos()[..4], 0.5, 0.0)
        .unwrap();
    assert_eq!(rep.max_gap, 0.0);
    assert!(rep.within_errors);
    let csv = rep.variants[0].pairing.to_csv();
    assert_eq!(csv.lines().count(), 5);
}

proptest! {
    #[test]
    fn eta_is_monotone_and_bounded(order in prop::sample::select(vec![1u32, 3, 5, 7]), x in 0.0f64..1.5, dx in 0.0f64..0.2) {
        let p = CutoffProfile::smoothstep(order).unwrap();
        let (a, b) = (p.eta(x), p.eta(x + dx));
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(b >= a - 1e-15);
        prop_assert!((p.eta(0.75) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn extrapolation_recovers_power_laws(limit in -5.0f64..5.0, c in 0.1f64..10.0, p in 3.5f64..6.0) {
        let r = rhos();
        let v: Vec<f64> = r.iter().map(|x| limit + c * x.powf(p)).collect();
        let ex = extrapolate_ren(&r, &v, 0.5, 0.0).unwrap();
        prop_assert!((ex.rate - p).abs() < 1e-6);
        prop_assert!((ex.limit - limit).abs() < 1e-9 * (1.0 + c));
    }
}
