//! ρ-cutoff decomposition of test functions and the ρ-renormalized pairing
//! K^ren_{B,ρ} = ⟨Φ^(ρ), K_B Ψ^(ρ)⟩ + ⟨χΦ^{<ρ}, K^cone χΨ^{<ρ}⟩_cone, with ρ↓0 extrapolation.

use crate::cone::{cone_pairing, ConeKernelParams};
use crate::error::{check_dim, invalid, Result};
use crate::geometry::{BaseGrid, GridKind};
use crate::heat::HeatEngine;
use crate::stats::{loglog_fit, LinearFit};
use serde::{Deserialize, Serialize};

/// η with η ≡ 0 on [0, 1/2], η ≡ 1 on [1, ∞), smoothstep of the given odd order in between.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutoffProfile {
    pub order: u32,
}

impl Default for CutoffProfile {
    fn default() -> Self {
        CutoffProfile { order: 3 }
    }
}

impl CutoffProfile {
    pub fn smoothstep(order: u32) -> Result<CutoffProfile> {
        let p = CutoffProfile { order };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        match self.order {
            1 | 3 | 5 | 7 => Ok(()),
            k => Err(invalid(format!("smoothstep order must be one of 1, 3, 5, 7, got {k}"))),
        }
    }

    pub fn eta(&self, x: f64) -> f64 {
        if x <= 0.5 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        let t = 2.0 * x - 1.0;
        match self.order {
            1 => t,
            3 => t * t * (3.0 - 2.0 * t),
            5 => t * t * t * (10.0 + t * (-15.0 + 6.0 * t)),
            _ => t.powi(4) * (35.0 + t * (-84.0 + t * (70.0 - 20.0 * t))),
        }
    }

    pub fn eta_rho(&self, r: f64, rho: f64) -> f64 {
        self.eta(r / rho)
    }
}

/// Radial tip cutoff χ = 1 − η(r/radius): χ ≡ 1 on r ≤ radius/2, χ ≡ 0 on r ≥ radius.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiCutoff {
    pub radius: f64,
    pub profile: CutoffProfile,
}

impl ChiCutoff {
    pub fn new(radius: f64) -> ChiCutoff {
        ChiCutoff { radius, profile: CutoffProfile::default() }
    }

    pub fn values(&self, grid: &BaseGrid) -> Vec<f64> {
        grid.nodes.iter().map(|p| 1.0 - self.profile.eta(p[0] / self.radius)).collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SplitTestFunction {
    /// Φ^(ρ) = η_ρ Φ on all grid nodes.
    pub outer: Vec<f64>,
    /// Φ^{<ρ} = Φ − Φ^(ρ), supported in r < ρ.
    pub inner: Vec<f64>,
    pub rho: f64,
    pub inner_l2: f64,
    pub sup_norm: f64,
    /// ‖Φ^{<ρ}‖₂ / (ρ ‖Φ‖_∞).
    pub l2_constant: f64,
}

pub fn split_test_function(phi: &[f64], grid: &BaseGrid, profile: &CutoffProfile, rho: f64) -> Result<SplitTestFunction> {
    check_dim(grid.len(), phi.len())?;
    profile.validate()?;
    if grid.kind != GridKind::PolarWedge {
        return Err(invalid("ρ-split needs a polar grid"));
    }
    if !(rho > 2.0 * grid.r_min && rho < grid.params.r0) {
        return Err(invalid(format!(
            "rho = {rho} outside (2 r_min, r0) = ({}, {})",
            2.0 * grid.r_min,
            grid.params.r0
        )));
    }
    let outer: Vec<f64> = grid.nodes.iter().zip(phi).map(|(p, v)| profile.eta_rho(p[0], rho) * v).collect();
    let inner: Vec<f64> = phi.iter().zip(&outer).map(|(a, b)| a - b).collect();
    let inner_l2 = inner.iter().zip(&grid.quad_weights).map(|(v, w)| w * v * v).sum::<f64>().sqrt();
    let sup_norm = phi.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let l2_constant = if sup_norm > 0.0 { inner_l2 / (rho * sup_norm) } else { 0.0 };
    Ok(SplitTestFunction { outer, inner, rho, inner_l2, sup_norm, l2_constant })
}

/// Values of a full-grid vector at the operator's degrees of freedom.
pub fn restrict_to_op(engine: &HeatEngine, v: &[f64]) -> Vec<f64> {
    engine.op.labels.iter().map(|&i| v[i]).collect()
}

/// ⟨Φ, e^{-τH_B} Ψ⟩ in the base mass inner product; inputs on full grid nodes.
pub fn base_pairing(engine: &HeatEngine, phi: &[f64], psi: &[f64], tau: f64) -> Result<f64> {
    check_dim(engine.op.full_dim, phi.len())?;
    check_dim(engine.op.full_dim, psi.len())?;
    let p = restrict_to_op(engine, phi);
    let h = engine.apply(tau, &restrict_to_op(engine, psi))?;
    Ok(engine.mass().iter().zip(&p).zip(&h).map(|((m, a), b)| m * a * b).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RenormTerms {
    pub rho: f64,
    pub outer: f64,
    pub inner: f64,
    pub total: f64,
}

/// Inputs shared by every ρ evaluation.
pub struct RenormSetup<'a> {
    pub engine: &'a HeatEngine,
    pub cone: ConeKernelParams,
    pub grid: &'a BaseGrid,
    pub phi: &'a [f64],
    pub psi: &'a [f64],
    pub tau: f64,
    pub profile: CutoffProfile,
    pub chi: &'a [f64],
}

pub fn rho_renormalized_pairing(setup: &RenormSetup, rho: f64) -> Result<RenormTerms> {
    check_dim(setup.grid.len(), setup.chi.len())?;
    let sp = split_test_function(setup.phi, setup.grid, &setup.profile, rho)?;
    let sq = split_test_function(setup.psi, setup.grid, &setup.profile, rho)?;
    let outer = base_pairing(setup.engine, &sp.outer, &sq.outer, setup.tau)?;
    let inner = cone_pairing(&setup.cone, setup.grid, &sp.inner, &sq.inner, setup.tau, setup.chi)?;
    Ok(RenormTerms { rho, outer, inner, total: outer + inner })
}

/// Split of the full base pairing: full = outer + mixed + inner_base, K^ren_ρ = outer + inner_cone.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct RenormDecomposition {
    pub rho: f64,
    pub full: f64,
    pub outer: f64,
    pub mixed: f64,
    pub inner_base: f64,
    pub inner_cone: f64,
}

impl RenormDecomposition {
    pub fn renormalized(&self) -> f64 {
        self.outer + self.inner_cone
    }

    /// Base-vs-cone mismatch on the inner region.
    pub fn edge(&self) -> f64 {
        self.inner_base - self.inner_cone
    }
}

pub fn renorm_decomposition(setup: &RenormSetup, rho: f64) -> Result<RenormDecomposition> {
    let sp = split_test_function(setup.phi, setup.grid, &setup.profile, rho)?;
    let sq = split_test_function(setup.psi, setup.grid, &setup.profile, rho)?;
    let e = setup.engine;
    let ps = restrict_to_op(e, &sp.outer);
    let pi = restrict_to_op(e, &sp.inner);
    let qs = restrict_to_op(e, &sq.outer);
    let qi = restrict_to_op(e, &sq.inner);
    let hs = e.apply(setup.tau, &qs)?;
    let hi = e.apply(setup.tau, &qi)?;
    let ip = |a: &[f64], b: &[f64]| -> f64 { e.mass().iter().zip(a).zip(b).map(|((m, x), y)| m * x * y).sum() };
    let outer = ip(&ps, &hs);
    let mixed = ip(&ps, &hi) + ip(&pi, &hs);
    let inner_base = ip(&pi, &hi);
    let inner_cone = cone_pairing(&setup.cone, setup.grid, &sp.inner, &sq.inner, setup.tau, setup.chi)?;
    Ok(RenormDecomposition { rho, full: outer + mixed + inner_base, outer, mixed, inner_base, inner_cone })
}

/// ρ_k = ρ_max 2^{-k}, k = 0..count, with ρ_max = r0/4.
pub fn default_rhos(r0: f64, count: usize) -> Vec<f64> {
    (0..count).map(|k| 0.25 * r0 * 0.5f64.powi(k as i32)).collect()
}

#[derive(Clone, Debug, Default, Serialize, PartialEq)]
pub struct ExtrapolationFlags {
    /// All successive differences at roundoff: no rate can be fitted.
    pub indeterminate: bool,
    /// Differences grow somewhere above the noise floor: no extrapolation performed.
    pub noisy: bool,
    /// Some differences fall below the supplied floor and were left out of the fit.
    pub floor_reached: bool,
    /// Fitted rate below 4 − 0.75.
    pub slow_rate: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct Extrapolation {
    pub limit: f64,
    pub rate: f64,
    /// 4 + β, the rate the edge remainder predicts.
    pub expected_rate: f64,
    pub err: f64,
    pub fit: Option<LinearFit>,
    /// |v(ρ_k) − v(ρ_{k+1})| at ρ_k.
    pub differences: Vec<(f64, f64)>,
    pub flags: ExtrapolationFlags,
}

pub const EXPECTED_RATE_THRESHOLD: f64 = 4.0 - 0.75;

/// Number of smallest-ρ differences used for the rate fit.
pub const FIT_TAIL: usize = 3;

/// Fit |v(ρ) − v_∞| = Cρ^p through the last successive differences and Richardson-extrapolate.
/// `floor` is the resolvable size of a difference; smaller ones are excluded.
pub fn extrapolate_ren(rhos: &[f64], values: &[f64], beta: f64, floor: f64) -> Result<Extrapolation> {
    check_dim(rhos.len(), values.len())?;
    if rhos.len() < 4 {
        return Err(invalid("extrapolation needs at least 4 rho values"));
    }
    for w in rhos.windows(2) {
        let q = w[1] / w[0];
        if !(q > 0.0 && q < 1.0) || (q - rhos[1] / rhos[0]).abs() > 1e-9 {
            return Err(invalid("rho sequence must decrease geometrically"));
        }
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite renormalized value"));
    }
    let expected_rate = 4.0 + beta;
    let q = rhos[0] / rhos[1];
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let noise = 64.0 * f64::EPSILON * scale;
    let floor = floor.max(noise);
    let n = values.len();
    let differences: Vec<(f64, f64)> = (0..n - 1).map(|k| (rhos[k], (values[k] - values[k + 1]).abs())).collect();
    let last = values[n - 1];
    let last_diff = values[n - 2] - values[n - 1];
    let mut flags = ExtrapolationFlags::default();
    if differences.iter().all(|d| d.1 <= noise) {
        flags.indeterminate = true;
        return Ok(Extrapolation { limit: last, rate: f64::NAN, expected_rate, err: noise, fit: None, differences, flags });
    }
    let resolved: Vec<(f64, f64)> = differences.iter().copied().filter(|d| d.1 > floor).collect();
    flags.floor_reached = resolved.len() < differences.len();
    let grows = differences.windows(2).any(|w| w[1].1 > w[0].1 && w[1].1 > floor);
    if grows {
        flags.noisy = true;
        let err = differences.iter().map(|d| d.1).fold(0.0, f64::max) + floor;
        return Ok(Extrapolation { limit: last, rate: f64::NAN, expected_rate, err, fit: None, differences, flags });
    }
    // the asymptotic regime is the small-ρ end; large ρ is pre-asymptotic
    let tail = &resolved[resolved.len().saturating_sub(FIT_TAIL)..];
    let (xs, ys): (Vec<f64>, Vec<f64>) = tail.iter().copied().unzip();
    let fit = loglog_fit(&xs, &ys);
    let rate = match fit {
        Some(f) if tail.len() >= 2 => f.slope,
        _ => {
            flags.indeterminate = true;
            return Ok(Extrapolation { limit: last, rate: f64::NAN, expected_rate, err: last_diff.abs() + floor, fit, differences, flags });
        }
    };
    flags.slow_rate = rate < EXPECTED_RATE_THRESHOLD;
    let limit = if rate > 0.0 && !flags.floor_reached { last - last_diff / (q.powf(rate) - 1.0) } else { last };
    let err = last_diff.abs() + floor;
    Ok(Extrapolation { limit, rate, expected_rate, err, fit, differences, flags })
}

#[derive(Clone, Debug, Serialize)]
pub struct RenormPairing {
    pub tau: f64,
    pub rho_sequence: Vec<f64>,
    pub values: Vec<RenormTerms>,
    pub extrapolation: Extrapolation,
}

impl RenormPairing {
    pub fn totals(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.total).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("rho,outer_term,inner_term,total\n");
        for v in &self.values {
            s.push_str(&format!("{:.10e},{:.16e},{:.16e},{:.16e}\n", v.rho, v.outer, v.inner, v.total));
        }
        s
    }
}

pub fn renorm_sweep(setup: &RenormSetup, rhos: &[f64], beta: f64, floor: f64) -> Result<RenormPairing> {
    let values = rhos.iter().map(|&r| rho_renormalized_pairing(setup, r)).collect::<Result<Vec<_>>>()?;
    let totals: Vec<f64> = values.iter().map(|v| v.total).collect();
    let extrapolation = extrapolate_ren(rhos, &totals, beta, floor)?;
    Ok(RenormPairing { tau: setup.tau, rho_sequence: rhos.to_vec(), values, extrapolation })
}

#[derive(Clone, Debug, Serialize)]
pub struct CutoffVariantResult {
    pub profile: CutoffProfile,
    pub chi_radius: f64,
    pub pairing: RenormPairing,
}

#[derive(Clone, Debug, Serialize)]
pub struct CutoffIndependenceReport {
    pub variants: Vec<CutoffVariantResult>,
    /// Largest |limit_i − limit_j| over pairs.
    pub max_gap: f64,
    /// Combined error estimate of the pair attaining `max_gap`.
    pub combined_err: f64,
    pub relative_gap: f64,
    pub within_errors: bool,
    /// Log-log slope of the per-ρ value difference between the first two variants.
    pub difference_rate: Option<f64>,
}

/// Run the ρ-sweep for every (profile, χ) variant and compare the extrapolated limits.
pub fn cutoff_independence_test(
    engine: &HeatEngine,
    cone: ConeKernelParams,
    grid: &BaseGrid,
    phi: &[f64],
    psi: &[f64],
    tau: f64,
    variants: &[(CutoffProfile, ChiCutoff)],
    rhos: &[f64],
    beta: f64,
    floor: f64,
) -> Result<CutoffIndependenceReport> {
    if variants.len() < 2 {
        return Err(invalid("cutoff independence needs at least two variants"));
    }
    let mut out = Vec::new();
    for (profile, chi) in variants {
        let chiv = chi.values(grid);
        let setup = RenormSetup { engine, cone, grid, phi, psi, tau, profile: *profile, chi: &chiv };
        out.push(CutoffVariantResult { profile: *profile, chi_radius: chi.radius, pairing: renorm_sweep(&setup, rhos, beta, floor)? });
    }
    let mut max_gap = 0.0;
    let mut combined_err = 0.0;
    let mut within = true;
    for i in 0..out.len() {
        for j in i + 1..out.len() {
            let (a, b) = (&out[i].pairing.extrapolation, &out[j].pairing.extrapolation);
            let gap = (a.limit - b.limit).abs();
            let ce = a.err + b.err;
            within &= gap <= 3.0 * ce;
            if gap >= max_gap {
                max_gap = gap;
                combined_err = ce;
            }
        }
    }
    let scale = out[0].pairing.extrapolation.limit.abs().max(f64::MIN_POSITIVE);
    let dv: Vec<f64> = out[0].pairing.totals().iter().zip(out[1].pairing.totals()).map(|(a, b)| (a - b).abs()).collect();
    let difference_rate = loglog_fit(rhos, &dv).map(|f| f.slope);
    Ok(CutoffIndependenceReport {
        variants: out,
        max_gap,
        combined_err,
        relative_gap: max_gap / scale,
        within_errors: within,
        difference_rate,
    })
}
