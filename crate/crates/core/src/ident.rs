//! Normalized lift I_t, fiber average P_t, fiber-constant projection and the compressed
//! semigroup S_t(τ) = P_t e^{-τH_t} I_t.

use crate::assembly::{vertical_energy, FibrationModel};
use crate::error::{check_dim, invalid, Result};
use crate::heat::HeatEngine;
use crate::linalg::{sub, wdot, wnorm};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::sync::Arc;

/// Factored sparse maps: (I v)(b,f) = lift[b]·v(b), (P u)(b) = Σ_f avg[(b,f)]·u(b,f).
#[derive(Clone, Debug)]
pub struct IdentificationPair {
    pub model: Arc<FibrationModel>,
    pub lift_coef: Vec<f64>,
    pub avg_coef: Vec<f64>,
}

pub fn build_identification(model: Arc<FibrationModel>) -> Result<IdentificationPair> {
    let nfib = model.n_fiber();
    let nb = model.base_dim();
    let mut lift_coef = Vec::with_capacity(nb);
    let mut avg_coef = Vec::with_capacity(nb * nfib);
    for b in 0..nb {
        let a = model.disint.fiber_area[b];
        if !(a > 0.0) {
            return Err(invalid(format!("zero fiber area at base node {b}")));
        }
        let c = a.powf(-0.5);
        lift_coef.push(c);
        // A^{1/2} ρ ϑ = A^{-1/2} m(b,f) / m_B(b)
        let mb = model.base_op.mass[b];
        for f in 0..nfib {
            avg_coef.push(c * model.total_op.mass[b * nfib + f] / mb);
        }
    }
    Ok(IdentificationPair { model, lift_coef, avg_coef })
}

impl IdentificationPair {
    pub fn base_dim(&self) -> usize {
        self.lift_coef.len()
    }

    pub fn total_dim(&self) -> usize {
        self.avg_coef.len()
    }

    pub fn base_mass(&self) -> &[f64] {
        &self.model.base_op.mass
    }

    pub fn total_mass(&self) -> &[f64] {
        &self.model.total_op.mass
    }

    pub fn lift(&self, v: &[f64]) -> Vec<f64> {
        let nfib = self.model.n_fiber();
        let mut u = Vec::with_capacity(self.total_dim());
        for (b, &c) in self.lift_coef.iter().enumerate() {
            let x = c * v[b];
            u.extend(std::iter::repeat_n(x, nfib));
        }
        u
    }

    pub fn average(&self, u: &[f64]) -> Vec<f64> {
        let nfib = self.model.n_fiber();
        (0..self.base_dim())
            .map(|b| {
                let r = b * nfib..(b + 1) * nfib;
                self.avg_coef[r.clone()].iter().zip(&u[r]).map(|(a, x)| a * x).sum()
            })
            .collect()
    }

    pub fn check_lift(&self, v: &[f64]) -> Result<()> {
        check_dim(self.base_dim(), v.len())
    }

    pub fn check_total(&self, u: &[f64]) -> Result<()> {
        check_dim(self.total_dim(), u.len())
    }
}

/// Π_fc u = I P u.
pub fn fiber_projection(pair: &IdentificationPair, u: &[f64]) -> Result<Vec<f64>> {
    pair.check_total(u)?;
    Ok(pair.lift(&pair.average(u)))
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct PoincareCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
    pub lambda1_exact: f64,
    /// Measured deviation of the total measure from the product measure, used as Cε.
    pub measure_deviation: f64,
}

/// ‖(1 − Π_fc)u‖² against s²·E_vert[u] / (c₀ (1 − Cε)) with c₀ = s²·λ₁(exact).
pub fn vertical_poincare_check(model: &FibrationModel, pair: &IdentificationPair, u: &[f64]) -> Result<PoincareCheck> {
    let pu = fiber_projection(pair, u)?;
    let r = sub(u, &pu);
    let lhs = wdot(pair.total_mass(), &r, &r);
    let lambda1 = model.fiber.lambda1();
    let delta = model.measure_deviation;
    if delta >= 1.0 {
        return Err(invalid("measure deviation >= 1; perturbation too large for the Poincaré bound"));
    }
    let v = vertical_energy(model, u)?;
    let rhs = v / (lambda1 * (1.0 - delta));
    let ratio = if rhs > 0.0 { lhs / rhs } else if lhs == 0.0 { 0.0 } else { f64::INFINITY };
    Ok(PoincareCheck { lhs, rhs, ratio, lambda1_exact: lambda1, measure_deviation: delta })
}

pub fn compress(pair: &IdentificationPair, engine: &HeatEngine, tau: f64, v: &[f64]) -> Result<Vec<f64>> {
    Ok(compress_multi(pair, engine, &[tau], v)?.pop().unwrap())
}

/// S(τ)v for several τ from one heat application.
pub fn compress_multi(pair: &IdentificationPair, engine: &HeatEngine, taus: &[f64], v: &[f64]) -> Result<Vec<Vec<f64>>> {
    pair.check_lift(v)?;
    check_dim(pair.total_dim(), engine.dim())?;
    let hs = engine.apply_multi(taus, &pair.lift(v))?;
    Ok(hs.iter().map(|h| pair.average(h)).collect())
}

/// ‖(1 − Π_fc) e^{-σH} I v‖ / ‖v‖.
pub fn leakage(pair: &IdentificationPair, engine: &HeatEngine, sigma: f64, v: &[f64]) -> Result<f64> {
    pair.check_lift(v)?;
    let nv = wnorm(pair.base_mass(), v);
    if nv == 0.0 {
        return Ok(0.0);
    }
    let w = engine.apply(sigma, &pair.lift(v))?;
    let r = sub(&w, &fiber_projection(pair, &w)?);
    Ok(wnorm(pair.total_mass(), &r) / nv)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct DefectEstimate {
    pub value: f64,
    /// Relative change of the estimate over the last iteration.
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct PowerOptions {
    pub max_iter: usize,
    /// Stop once the relative change of the estimate drops below this.
    pub rel_tol: f64,
    pub seed: u64,
}

impl Default for PowerOptions {
    fn default() -> Self {
        PowerOptions { max_iter: 50, rel_tol: 1e-6, seed: 17 }
    }
}

/// Operator-norm estimate of S(τ)S(σ) − S(τ+σ) by power iteration.
pub fn semigroup_defect(pair: &IdentificationPair, engine: &HeatEngine, tau: f64, sigma: f64) -> Result<DefectEstimate> {
    semigroup_defect_with(pair, engine, tau, sigma, PowerOptions::default())
}

pub fn semigroup_defect_with(
    pair: &IdentificationPair,
    engine: &HeatEngine,
    tau: f64,
    sigma: f64,
    opts: PowerOptions,
) -> Result<DefectEstimate> {
    let mb = pair.base_mass();
    let n = pair.base_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let nx = wnorm(mb, &x);
    x.iter_mut().for_each(|a| *a /= nx);
    // D x = S(τ)S(σ)x − S(τ+σ)x
    let apply_d = |x: &[f64], first: f64, second: f64| -> Result<Vec<f64>> {
        let s = compress_multi(pair, engine, &[first, first + second], x)?;
        let ss = compress(pair, engine, second, &s[0])?;
        Ok(sub(&ss, &s[1]))
    };
    let selfadj = (tau - sigma).abs() <= 1e-15 * tau.max(sigma);
    let mut est = 0.0;
    let mut residual = f64::INFINITY;
    let mut it = 0;
    while it < opts.max_iter {
        it += 1;
        let y = apply_d(&x, sigma, tau)?;
        let new_est;
        let next;
        if selfadj {
            new_est = wnorm(mb, &y);
            next = y;
        } else {
            // D* = S(σ)S(τ) − S(τ+σ)
            let z = apply_d(&y, tau, sigma)?;
            new_est = wdot(mb, &x, &z).max(0.0).sqrt();
            next = z;
        }
        residual = if new_est > 0.0 { (new_est - est).abs() / new_est } else { 0.0 };
        est = new_est;
        let nn = wnorm(mb, &next);
        if nn == 0.0 || residual < opts.rel_tol {
            break;
        }
        x = next.iter().map(|a| a / nn).collect();
    }
    Ok(DefectEstimate { value: est, residual, iterations: it })
}

/// E_t[I v] − E_B[v].
pub fn lift_energy_gap(pair: &IdentificationPair, v: &[f64]) -> Result<f64> {
    pair.check_lift(v)?;
    let et = pair.model.total_op.stiffness.quad_form(&pair.lift(v));
    let eb = pair.model.base_op.stiffness.quad_form(v);
    Ok(et - eb)
}
