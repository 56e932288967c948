//! Invariant suites per module on a small model derived from an experiment config.

use crate::assembly::{assemble_total, kronecker_sum, Bc, FibrationModel};
use crate::cone::{cone_kernel, plane_gaussian, verify_gaussian_bound, ConeKernelParams};
use crate::error::Result;
use crate::geometry::{build_cone_chart, build_fiber_lattice, torus_gap_lower_bound, PerturbationField};
use crate::harness::ExperimentConfig;
use crate::heat::{build_engine, smoothed_energy, EngineMode};
use crate::ident::{build_identification, fiber_projection, vertical_poincare_check, IdentificationPair};
use crate::linalg::{max_abs, sub, wdot, wnorm};
use crate::renorm::{extrapolate_ren, split_test_function};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::sync::Arc;

const SMALL_NF: usize = 8;

pub const MODULES: [&str; 6] = ["geometry", "assembly", "heat", "ident", "cone", "renorm"];

#[derive(Clone, Copy, Debug)]
pub struct InvariantOptions {
    pub break_normalization: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct InvariantResult {
    pub id: String,
    pub pass: bool,
    pub value: f64,
    pub limit: f64,
}

fn le(id: &str, value: f64, limit: f64) -> InvariantResult {
    InvariantResult { id: id.into(), pass: value <= limit, value, limit }
}

struct Small {
    model: Arc<FibrationModel>,
    pair: IdentificationPair,
}

fn small_model(cfg: &ExperimentConfig, opts: &InvariantOptions) -> Result<Small> {
    let grid = build_cone_chart(cfg.cone, 16, 16, cfg.base_grid.r_min.max(0.02))?;
    let step = cfg.schedule.build()?.steps[0];
    let lattice = build_fiber_lattice(cfg.fiber.basis, step.s)?;
    let field = PerturbationField { c1_norm_target: step.epsilon, profile: cfg.perturbation.profile, seed: opts.seed };
    let model = Arc::new(assemble_total(&grid, &lattice, SMALL_NF, &field, cfg.bc)?);
    let mut pair = build_identification(model.clone())?;
    if opts.break_normalization {
        pair.lift_coef.iter_mut().for_each(|c| *c *= 1.01);
    }
    Ok(Small { model, pair })
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn run_invariants(cfg: &ExperimentConfig, modules: &[String], opts: &InvariantOptions) -> Result<Vec<InvariantResult>> {
    let mut out = Vec::new();
    let small = small_model(cfg, opts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for m in modules {
        match m.as_str() {
            "geometry" => geometry(cfg, &small, &mut out)?,
            "assembly" => assembly(cfg, &small, &mut out)?,
            "heat" => heat(&small, &mut rng, &mut out)?,
            "ident" => ident(&small, &mut rng, &mut out)?,
            "cone" => cone(cfg, &mut out)?,
            "renorm" => renorm(cfg, &small, &mut out)?,
            _ => {}
        }
    }
    Ok(out)
}

fn geometry(cfg: &ExperimentConfig, s: &Small, out: &mut Vec<InvariantResult>) -> Result<()> {
    let g = &s.model.base;
    let wmin = g.cone_weights.iter().copied().fold(f64::INFINITY, f64::min);
    out.push(InvariantResult { id: "geometry.cone_weights_positive".into(), pass: wmin > 0.0, value: wmin, limit: 0.0 });
    let dmin = g.metric_coeffs.iter().map(|m| m[0][0] * m[1][1] - m[0][1] * m[1][0]).fold(f64::INFINITY, f64::min);
    out.push(InvariantResult { id: "geometry.metric_positive_definite".into(), pass: dmin > 0.0, value: dmin, limit: 0.0 });
    let lat = build_fiber_lattice(cfg.fiber.basis, 1.0)?;
    let gap = torus_gap_lower_bound(&lat);
    out.push(InvariantResult { id: "geometry.torus_gap_bound".into(), pass: gap <= lat.lambda1() * (1.0 + 1e-12), value: gap, limit: lat.lambda1() });
    Ok(())
}

fn assembly(cfg: &ExperimentConfig, s: &Small, out: &mut Vec<InvariantResult>) -> Result<()> {
    let m = &s.model;
    for (name, op) in [("base", &m.base_op), ("total", &m.total_op)] {
        let r = op.validate()?;
        out.push(le(&format!("assembly.{name}_symmetry"), r.symmetry_defect, 1e-13 * op.stiffness.frobenius_norm()));
    }
    out.push(le("assembly.disintegration_normalized", m.disint.normalization_defect(), 1e-12));
    // unperturbed product form
    let lattice = build_fiber_lattice(cfg.fiber.basis, m.scale())?;
    let flat = assemble_total(&m.base, &lattice, SMALL_NF, &PerturbationField::zero(), cfg.bc)?;
    let k = kronecker_sum(&flat.base_op, &flat.fiber_op);
    let scale = flat.total_op.stiffness.max_abs();
    out.push(le("assembly.product_form_at_zero_eps", flat.total_op.stiffness.max_abs_diff(&k), 1e-12 * scale));
    Ok(())
}

fn heat(s: &Small, rng: &mut ChaCha8Rng, out: &mut Vec<InvariantResult>) -> Result<()> {
    let op = Arc::new(s.model.base_op.clone());
    let e = build_engine(op.clone(), EngineMode::DenseSpectral)?;
    let km = e.kernel_matrix(0.1)?;
    let c = km.check(e.mass());
    out.push(le("heat.kernel_symmetric", c.symmetry, 1e-10));
    out.push(InvariantResult { id: "heat.kernel_nonnegative".into(), pass: c.min_entry >= -1e-10, value: c.min_entry, limit: -1e-10 });
    match op.bc {
        Bc::Neumann => out.push(le("heat.row_mass_conserved", c.max_row_mass_sum_dev, 1e-8)),
        Bc::Dirichlet => out.push(le("heat.row_mass_submarkov", c.max_row_mass_sum - 1.0, 1e-8)),
    }
    let sigma = 0.05;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let v = random_vec(rng, e.dim());
        let ratio = smoothed_energy(&e, sigma, &v)? * sigma / wdot(e.mass(), &v, &v);
        worst = worst.max(ratio);
    }
    out.push(le("heat.smoothing_bound", worst, 1.0 / (2.0 * std::f64::consts::E) + 1e-6));
    Ok(())
}

fn ident(s: &Small, rng: &mut ChaCha8Rng, out: &mut Vec<InvariantResult>) -> Result<()> {
    let p = &s.pair;
    let (mut pi, mut adj, mut idem, mut poinc): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..10 {
        let v = random_vec(rng, p.base_dim());
        let u = random_vec(rng, p.total_dim());
        let back = p.average(&p.lift(&v));
        pi = pi.max(max_abs(&sub(&back, &v)) / max_abs(&v));
        let a = wdot(p.total_mass(), &p.lift(&v), &u);
        let b = wdot(p.base_mass(), &v, &p.average(&u));
        adj = adj.max((a - b).abs() / (wnorm(p.base_mass(), &v) * wnorm(p.total_mass(), &u)));
        let pu = fiber_projection(p, &u)?;
        idem = idem.max(max_abs(&sub(&fiber_projection(p, &pu)?, &pu)) / max_abs(&pu).max(1e-300));
        poinc = poinc.max(vertical_poincare_check(&s.model, p, &u)?.ratio);
    }
    out.push(le("ident.average_lift_identity", pi, 1e-12));
    out.push(le("ident.adjointness", adj, 1e-12));
    out.push(le("ident.projection_idempotent", idem, 1e-12));
    out.push(le("ident.vertical_poincare", poinc, 1.1));
    Ok(())
}

fn cone(cfg: &ExperimentConfig, out: &mut Vec<InvariantResult>) -> Result<()> {
    let plane = ConeKernelParams::new(1.0);
    let mut worst: f64 = 0.0;
    for &tau in &[0.01f64, 0.1, 1.0] {
        for k in 0..20 {
            let r = 0.1 + 0.04 * k as f64;
            let rp = r + 0.3 * r * tau.sqrt() * (k as f64).sin();
            let dt = 0.7 * tau.sqrt() / r * (k as f64).cos();
            let d2 = r * r + rp * rp - 2.0 * r * rp * dt.cos();
            let g = plane_gaussian(d2, tau);
            worst = worst.max((cone_kernel(&plane, r, 0.2, rp, 0.2 + dt, tau)? - g).abs() / g);
        }
    }
    out.push(le("cone.plane_reduction", worst, 1e-10));
    let params = ConeKernelParams::new(cfg.cone.alpha);
    let samples: Vec<(f64, f64, f64, f64)> =
        (0..12).map(|k| (0.2 + 0.1 * k as f64, 0.0, 0.5 + 0.05 * k as f64, 0.5 * k as f64)).collect();
    let rep = verify_gaussian_bound(&params, &samples, &[0.05, 0.1, 0.2])?;
    out.push(InvariantResult {
        id: "cone.gaussian_envelope".into(),
        pass: rep.bound_holds && rep.within_envelope,
        value: rep.c_const,
        limit: 10.0,
    });
    Ok(())
}

fn renorm(cfg: &ExperimentConfig, s: &Small, out: &mut Vec<InvariantResult>) -> Result<()> {
    let g = &s.model.base;
    let phi = cfg.phi.sample(g);
    let rho = 0.25 * cfg.cone.r0;
    let sp = split_test_function(&phi, g, &cfg.cutoff, rho)?;
    let dev = phi.iter().zip(sp.outer.iter().zip(&sp.inner)).map(|(p, (o, i))| (p - o - i).abs()).fold(0.0, f64::max);
    out.push(le("renorm.split_partition", dev, 1e-14));
    let rhos: Vec<f64> = (0..6).map(|k| 0.5 * 0.5f64.powi(k)).collect();
    let beta = cfg.cone.beta;
    let vals: Vec<f64> = rhos.iter().map(|r| 1.0 + r.powf(4.0 + beta)).collect();
    let ex = extrapolate_ren(&rhos, &vals, beta, 0.0)?;
    out.push(le("renorm.synthetic_extrapolation", (ex.limit - 1.0).abs(), 1e-10));
    Ok(())
}
