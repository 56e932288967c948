//! Acceptance criteria 1–12, one PASS/FAIL line each.

use collapse_heat::assembly::{assemble_base, assemble_total, base_points, Bc, FibrationModel};
use collapse_heat::cone::{cone_distance, cone_kernel, plane_gaussian, ConeKernelParams};
use collapse_heat::geometry::{
    build_cone_chart, build_cone_chart_with, build_fiber_lattice, ConeParams, PerturbationField, PerturbationProfile,
    RadialSpacing, ScheduleStep,
};
use collapse_heat::harness::{
    build_base_side, cutoff_variants, edge_rate_study, evaluate_step, rate_study, renorm_limits, run_iterated_limit,
    BaseGridSpec, BookkeepingReport, Channel, ExperimentConfig, PowerOptionsConfig, RateStudyConfig, TestFunction,
};
use collapse_heat::heat::{build_engine, smoothed_energy, EngineMode};
use collapse_heat::ident::{build_identification, fiber_projection, vertical_poincare_check};
use collapse_heat::linalg::{sub, wdot, wnorm};
use collapse_heat::renorm::CutoffProfile;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

type Outcome = collapse_heat::Result<(bool, String)>;

fn default_config() -> ExperimentConfig {
    ExperimentConfig::from_json_str(include_str!("../configs/default.json")).unwrap()
}

fn negative_config() -> ExperimentConfig {
    ExperimentConfig::from_json_str(include_str!("../configs/negative_control.json")).unwrap()
}

fn default_report() -> &'static BookkeepingReport {
    static R: OnceLock<BookkeepingReport> = OnceLock::new();
    R.get_or_init(|| run_iterated_limit(&default_config(), 4).unwrap())
}

fn cone() -> ConeParams {
    ConeParams::new(0.75, 0.5, 2.0, 0.3).unwrap()
}

fn rvec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn identity_model(bc: Bc) -> collapse_heat::Result<Arc<FibrationModel>> {
    let grid = build_cone_chart(cone(), 24, 24, 0.02)?;
    let lattice = build_fiber_lattice([[1.0, 0.0], [0.0, 1.0]], 0.2)?;
    let field = PerturbationField { c1_norm_target: 0.05, profile: PerturbationProfile::default(), seed: 11 };
    Ok(Arc::new(assemble_total(&grid, &lattice, 12, &field, bc)?))
}

fn criterion_1(bc: Bc) -> Outcome {
    let model = identity_model(bc)?;
    let pair = build_identification(model.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut pi, mut adj, mut iso): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..100 {
        let v = rvec(&mut rng, pair.base_dim());
        let u = rvec(&mut rng, pair.total_dim());
        let (nv, nu) = (wnorm(pair.base_mass(), &v), wnorm(pair.total_mass(), &u));
        let iv = pair.lift(&v);
        pi = pi.max(wnorm(pair.base_mass(), &sub(&pair.average(&iv), &v)) / nv);
        adj = adj.max((wdot(pair.total_mass(), &iv, &u) - wdot(pair.base_mass(), &v, &pair.average(&u))).abs() / (nv * nu));
        iso = iso.max((wnorm(pair.total_mass(), &iv) - nv).abs() / nv);
    }
    let ok = pi <= 1e-12 && adj <= 1e-12 && iso <= 1e-12;
    Ok((ok, format!("dim {} |PIv-v| {pi:.2e}, adjoint {adj:.2e}, isometry {iso:.2e} (limit 1e-12)", pair.total_dim())))
}

fn criterion_2(bc: Bc) -> Outcome {
    let model = identity_model(bc)?;
    let pair = build_identification(model.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let u = rvec(&mut rng, pair.total_dim());
        worst = worst.max(vertical_poincare_check(&model, &pair, &u)?.ratio);
    }
    // first fiber mode cos(2π i/n_f) times a smooth base profile
    let nf = 12;
    let nfib = model.n_fiber();
    let base_pts = base_points(&model.base, &model.base_op);
    let mut u = Vec::with_capacity(pair.total_dim());
    for p in &base_pts {
        let w = (1.0 - (p[0] / 2.0).powi(2)).max(0.0);
        for f in 0..nfib {
            let i = f / nf;
            u.push(w * (2.0 * std::f64::consts::PI * i as f64 / nf as f64).cos());
        }
    }
    let u = sub(&u, &fiber_projection(&pair, &u)?);
    let mode = vertical_poincare_check(&model, &pair, &u)?;
    let ok = worst <= 1.1 && (0.95..=1.05).contains(&mode.ratio);
    Ok((ok, format!("random max ratio {worst:.4} (<= 1.1), first-mode ratio {:.4} (in [0.95, 1.05]), measure deviation {:.3e}", mode.ratio, mode.measure_deviation)))
}

fn criterion_3() -> Outcome {
    let params = ConeKernelParams::new(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for &tau in &[0.01f64, 0.1, 1.0] {
        for _ in 0..200 {
            let r: f64 = rng.random_range(0.05..2.0);
            let rp = r * (1.0 + 0.3 * tau.sqrt() * rng.random_range(-1.0..1.0));
            let th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let dt = 0.7 * tau.sqrt() / r * rng.random_range(-1.0..1.0);
            let d2 = r * r + rp * rp - 2.0 * r * rp * dt.cos();
            let g = plane_gaussian(d2, tau);
            worst = worst.max((cone_kernel(&params, r, th, rp, th + dt, tau)? - g).abs() / g);
            n += 1;
        }
    }
    Ok((worst <= 1e-10, format!("{n} pairs, max relative error {worst:.2e} (limit 1e-10)")))
}

fn criterion_4() -> Outcome {
    let p = ConeParams::new(0.75, 0.5, 2.0, 0.0)?;
    let g = build_cone_chart_with(p, RadialSpacing::Graded { rings_per_octave: 4, h_out: 0.05 }, 48, 0.02)?;
    let op = Arc::new(assemble_base(&g, Bc::Dirichlet)?);
    let e = build_engine(op.clone(), EngineMode::DenseSpectral)?;
    let km = e.kernel_matrix(0.1)?;
    let c = ConeKernelParams::new(0.75);
    let pts = base_points(&g, &op);
    let dth = 2.0 * std::f64::consts::PI / 48.0;
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for i in 0..pts.len() {
        let (r, t) = (pts[i][0], pts[i][1]);
        if !(0.3..0.7).contains(&r) || (t / dth).round() as usize % 8 != 0 {
            continue;
        }
        for j in 0..pts.len() {
            let (rp, tp) = (pts[j][0], pts[j][1]);
            if !(0.3..0.7).contains(&rp) {
                continue;
            }
            let d = cone_distance(0.75, r, t, rp, tp);
            if d * d / 0.4 > 1.0 {
                continue;
            }
            let kc = cone_kernel(&c, r, t, rp, tp, 0.1)?;
            worst = worst.max((km.get(i, j) - kc).abs() / kc);
            n += 1;
        }
    }
    Ok((worst <= 0.02, format!("{n} interior pairs on {} nodes, max relative deviation {:.3}% (limit 2%)", g.len(), 100.0 * worst)))
}

fn criterion_5(bc: Bc) -> Outcome {
    let cfg = default_config();
    let grid = cfg.base_grid.build(cfg.cone)?;
    let e = build_engine(Arc::new(assemble_base(&grid, bc)?), EngineMode::DenseSpectral)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let sigma: f64 = 10f64.powf(rng.random_range(-3.0..0.0));
        let v = rvec(&mut rng, e.dim());
        worst = worst.max(smoothed_energy(&e, sigma, &v)? * sigma / wdot(e.mass(), &v, &v));
    }
    let limit = 1.0 / (2.0 * std::f64::consts::E) + 1e-6;
    Ok((worst <= limit, format!("max sigma*E/|v|^2 = {worst:.5} (limit {limit:.5})")))
}

fn rate_config(amplitude: f64) -> RateStudyConfig {
    RateStudyConfig {
        cone: cone(),
        n_r: 16,
        n_theta: 16,
        r_min: 0.02,
        n_f: 8,
        basis: [[1.0, 0.0], [0.0, 1.0]],
        scales: vec![0.4, 0.2, 0.1, 0.05],
        amplitude,
        profile: PerturbationProfile::default(),
        seed: 7,
        sigma: 0.1,
        bc: Bc::Dirichlet,
        test_functions: vec![
            TestFunction::RadialBump { width: 1.5, power: 3 },
            TestFunction::AngularBump { width: 1.2, power: 3, mode: 1, amplitude: 0.5 },
        ],
        power: PowerOptionsConfig { max_iter: 50, rel_tol: 1e-6, seed: 17 },
    }
}

fn criterion_6() -> Outcome {
    let st = rate_study(&rate_config(0.05))?;
    let zero = rate_study(&rate_config(0.0))?;
    let in_band = |v: &[f64]| v.iter().all(|r| (0.3..=0.7).contains(r));
    let zmax = zero.points.iter().map(|p| p.leakage.max(p.defect)).fold(0.0, f64::max);
    let ok = in_band(&st.leakage_ratios) && in_band(&st.defect_ratios) && zmax <= 1e-9;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ");
    Ok((
        ok,
        format!(
            "leakage ratios [{}], defect ratios [{}] (band [0.3, 0.7]); eps=0 max {zmax:.2e} (limit 1e-9); leakage {:.3e}..{:.3e}, defect {:.3e}..{:.3e}",
            fmt(&st.leakage_ratios),
            fmt(&st.defect_ratios),
            st.points[0].leakage,
            st.points.last().unwrap().leakage,
            st.points[0].defect,
            st.points.last().unwrap().defect
        ),
    ))
}

fn criterion_7() -> Outcome {
    let rep = default_report();
    let mut worst_r2: f64 = 1.0;
    let mut max_slope = f64::NEG_INFINITY;
    for reg in &rep.fits.interior_regressions {
        match &reg.fit {
            Some(f) => {
                worst_r2 = worst_r2.min(f.r2);
                max_slope = max_slope.max(f.slope);
            }
            None => return Ok((false, format!("no interior regression at rho {} tau {}", reg.rho, reg.tau))),
        }
    }
    let cfg = default_config();
    let base = build_base_side(&cfg, &cfg.base_grid)?;
    let (_, recs) = evaluate_step(&cfg, &base, 0, &ScheduleStep { s: 0.15, epsilon: 0.0 })?;
    let control = recs.iter().map(|r| r.interior.abs()).fold(0.0, f64::max);
    let ok = worst_r2 >= 0.9 && max_slope < 0.0 && control <= 1e-6;
    Ok((ok, format!("ln|interior| vs 1/s: min R^2 {worst_r2:.4}, max slope {max_slope:.3}; eps=0 control {control:.2e} (limit 1e-6)")))
}

fn criterion_8() -> Outcome {
    let cfg = default_config();
    let r0 = cfg.cone.r0;
    let rhos: Vec<f64> = [0.25, 0.125, 0.0625, 0.03125].iter().map(|x| x * r0).collect();
    let st = edge_rate_study(&cfg, &rhos, 0.1)?;
    let slope = st.slope.unwrap_or(f64::NAN);
    let ok = slope >= 3.25 || st.floor_flagged;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2e}")).collect::<Vec<_>>().join(", ");
    Ok((
        ok,
        format!(
            "slope {slope:.3} (threshold 3.25), floor flagged {}; |dK| [{}], mixed part [{}], edge part [{}], floors [{}]",
            st.floor_flagged,
            fmt(&st.differences),
            fmt(&st.mixed_differences),
            fmt(&st.edge_differences),
            fmt(&st.difference_floors)
        ),
    ))
}

fn criterion_9() -> Outcome {
    let cfg = default_config();
    let k3 = CutoffProfile { order: 3 };
    let k5 = CutoffProfile { order: 5 };
    let rep = cutoff_variants(&cfg, 0.1, &[(k3, 0.5), (k5, 0.5), (k3, 0.3), (k5, 0.3)])?;
    let ok = rep.within_errors && rep.relative_gap <= 1e-4;
    Ok((ok, format!("max gap {:.2e} vs 3x combined error {:.2e}, relative {:.2e} (limit 1e-4)", rep.max_gap, 3.0 * rep.combined_err, rep.relative_gap)))
}

fn criterion_10() -> Outcome {
    let rep = default_report();
    let neg = run_iterated_limit(&negative_config(), 4)?;
    let ok = rep.verdict.pass && !neg.verdict.pass && neg.verdict.blamed == Some(Channel::Interior);
    let ls = rep.limsups.iter().map(|l| format!("{:.2e}", l.limsup)).collect::<Vec<_>>().join(", ");
    Ok((
        ok,
        format!(
            "default {} (limsups [{ls}], final {:.2e} <= 3 x {:.2e}); negative control {} blamed {:?}",
            if rep.verdict.pass { "PASS" } else { "FAIL" },
            rep.verdict.final_value,
            rep.verdict.final_estimate,
            if neg.verdict.pass { "PASS" } else { "FAIL" },
            neg.verdict.blamed
        ),
    ))
}

fn criterion_11() -> Outcome {
    let cfg = default_config();
    let half = BaseGridSpec { r_min: 0.5 * cfg.base_grid.r_min, ..cfg.base_grid.clone() };
    let (a, ra) = renorm_limits(&cfg, &cfg.base_grid)?;
    let (b, rb) = renorm_limits(&cfg, &half)?;
    let rel = |x: f64, y: f64| (x - y).abs() / x.abs().max(1e-300);
    let mut worst: f64 = 0.0;
    for (x, y) in a.full.iter().zip(&b.full) {
        worst = worst.max(rel(*x, *y));
    }
    for (x, y) in a.targets.iter().flatten().zip(b.targets.iter().flatten()) {
        worst = worst.max(rel(x.value, y.value));
    }
    for (x, y) in ra.iter().zip(&rb) {
        for (u, v) in x.totals().iter().zip(y.totals()) {
            worst = worst.max(rel(*u, v));
        }
        worst = worst.max(rel(x.extrapolation.limit, y.extrapolation.limit));
    }
    let step = ScheduleStep { s: 0.15, epsilon: 0.3 * (-0.5f64 / 0.15).exp() };
    let (_, ta) = evaluate_step(&cfg, &a, 0, &step)?;
    let (_, tb) = evaluate_step(&cfg, &b, 0, &step)?;
    for (x, y) in ta.iter().zip(&tb) {
        worst = worst.max(rel(x.total, y.total));
    }
    Ok((worst <= 1e-4, format!("r_min {} -> {}: max relative change {worst:.2e} (limit 1e-4)", cfg.base_grid.r_min, half.r_min)))
}

fn criterion_12() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, f) in [("1", criterion_1 as fn(Bc) -> Outcome), ("2", criterion_2), ("5", criterion_5)] {
        for bc in [Bc::Dirichlet, Bc::Neumann] {
            let (p, _) = f(bc)?;
            ok &= p;
            parts.push(format!("{name}/{bc:?} {}", if p { "ok" } else { "fail" }));
        }
    }
    let cfg = default_config();
    let grid = cfg.base_grid.build(cfg.cone)?;
    let e = build_engine(Arc::new(assemble_base(&grid, Bc::Neumann)?), EngineMode::DenseSpectral)?;
    let mut dev: f64 = 0.0;
    for tau in [0.05, 0.1, 0.2] {
        dev = dev.max(e.kernel_matrix(tau)?.check(e.mass()).max_row_mass_sum_dev);
    }
    ok &= dev <= 1e-8;
    Ok((ok, format!("{}; Neumann row mass-sum deviation {dev:.2e} (limit 1e-8)", parts.join(", "))))
}

#[test]
fn acceptance() {
    let criteria: Vec<(u32, Box<dyn Fn() -> Outcome>)> = vec![
        (1, Box::new(|| criterion_1(Bc::Dirichlet))),
        (2, Box::new(|| criterion_2(Bc::Dirichlet))),
        (3, Box::new(criterion_3)),
        (4, Box::new(criterion_4)),
        (5, Box::new(|| criterion_5(Bc::Dirichlet))),
        (6, Box::new(criterion_6)),
        (7, Box::new(criterion_7)),
        (8, Box::new(criterion_8)),
        (9, Box::new(criterion_9)),
        (10, Box::new(criterion_10)),
        (11, Box::new(criterion_11)),
        (12, Box::new(criterion_12)),
    ];
    let mut failed = Vec::new();
    for (n, f) in criteria {
        let t0 = Instant::now();
        let (pass, detail) = match f() {
            Ok(x) => x,
            Err(e) => (false, format!("error: {e}")),
        };
        println!("criterion {n:>2}: {} ({:.1} s) {detail}", if pass { "PASS" } else { "FAIL" }, t0.elapsed().as_secs_f64());
        if !pass {
            failed.push(n);
        }
    }
    assert!(failed.is_empty(), "failing acceptance criteria: {failed:?}");
}
