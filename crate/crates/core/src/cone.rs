//! Friedrichs heat kernel of the flat cone dr² + α²r²dθ² by angular Bessel series.
//!
//! K = (4πατ)⁻¹ e^{-(r-r')²/4τ} Σ_{n∈Z} Ĩ_{|n|/α}(x) e^{in(θ-θ')}, x = rr'/(2τ),
//! with Ĩ_ν = e^{-x} I_ν the scaled modified Bessel function.

use crate::error::{check_dim, invalid, Error, Result};
use crate::geometry::{BaseGrid, GridKind};
use crate::special::{bessel_i_scaled, bessel_ratio_bound};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeKernelParams {
    pub alpha: f64,
    pub series_tol: f64,
    pub max_terms: usize,
}

impl ConeKernelParams {
    pub fn new(alpha: f64) -> ConeKernelParams {
        ConeKernelParams { alpha, series_tol: 1e-13, max_terms: 2000 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.series_tol > 0.0) || self.max_terms == 0 {
            return Err(invalid("cone kernel needs alpha > 0, series_tol > 0, max_terms >= 1"));
        }
        Ok(())
    }
}

/// Angular-mode coefficients Ĩ_{n/α}(x), n = 0..len, with a certified tail bound.
#[derive(Clone, Debug)]
pub struct AngularSeries {
    pub x: f64,
    pub terms: Vec<f64>,
    /// Bound on Σ over the omitted ±n.
    pub tail: f64,
}

impl AngularSeries {
    pub fn new(params: &ConeKernelParams, x: f64) -> Result<AngularSeries> {
        let a = params.alpha;
        let tol = params.series_tol;
        let mut terms = vec![bessel_i_scaled(0.0, x)];
        let mut n = 1usize;
        loop {
            if n > params.max_terms {
                let nu = n as f64 / a;
                let t = bessel_i_scaled(nu, x);
                let tail = 2.0 * t * (a + 1.0) / (1.0 - bessel_ratio_bound(nu, x));
                return Err(Error::Convergence { what: format!("cone series at x = {x:.4e}"), achieved: tail, target: tol });
            }
            let nu = n as f64 / a;
            let t = bessel_i_scaled(nu, x);
            terms.push(t);
            // Σ_{m≥n} Ĩ_{m/α} ≤ Ĩ_{n/α} (α+1) / (1 − q(n/α)), doubled for ±m
            let majorant = 2.0 * t * (a + 1.0) / (1.0 - bessel_ratio_bound(nu, x));
            if t < tol && terms[n - 1] < tol && majorant < tol {
                return Ok(AngularSeries { x, terms, tail: majorant });
            }
            n += 1;
        }
    }

    /// Σ_n Ĩ_{|n|/α}(x) cos(nΔθ).
    pub fn sum(&self, dtheta: f64) -> f64 {
        let mut s = self.terms[0];
        for (n, t) in self.terms.iter().enumerate().skip(1) {
            s += 2.0 * t * (n as f64 * dtheta).cos();
        }
        s
    }

    /// The n-th term of the series including the conjugate pair, for order checks.
    pub fn term(&self, n: usize, dtheta: f64) -> f64 {
        if n == 0 {
            self.terms[0]
        } else {
            2.0 * self.terms[n] * (n as f64 * dtheta).cos()
        }
    }
}

pub fn cone_kernel(params: &ConeKernelParams, r: f64, theta: f64, rp: f64, thetap: f64, tau: f64) -> Result<f64> {
    params.validate()?;
    if !(r > 0.0 && rp > 0.0) {
        return Err(invalid("cone kernel needs r, r' > 0"));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(invalid(format!("tau must be > 0, got {tau}")));
    }
    let x = r * rp / (2.0 * tau);
    let series = AngularSeries::new(params, x)?;
    Ok(kernel_from_series(params.alpha, r, rp, tau, &series, theta - thetap))
}

fn kernel_from_series(alpha: f64, r: f64, rp: f64, tau: f64, series: &AngularSeries, dtheta: f64) -> f64 {
    let pref = (-(r - rp) * (r - rp) / (4.0 * tau)).exp() / (4.0 * PI * alpha * tau);
    pref * series.sum(dtheta)
}

/// (4πτ)⁻¹ e^{-d²/4τ}.
pub fn plane_gaussian(d2: f64, tau: f64) -> f64 {
    (-d2 / (4.0 * tau)).exp() / (4.0 * PI * tau)
}

/// Geodesic distance on the flat cone of angle 2πα.
pub fn cone_distance(alpha: f64, r: f64, theta: f64, rp: f64, thetap: f64) -> f64 {
    let mut dt = (theta - thetap).rem_euclid(2.0 * PI);
    if dt > PI {
        dt = 2.0 * PI - dt;
    }
    let phi = alpha * dt;
    if phi <= PI {
        (r * r + rp * rp - 2.0 * r * rp * phi.cos()).max(0.0).sqrt()
    } else {
        r + rp
    }
}

/// Σ_{b,b'} χ(b)χ(b') K^cone(b,b';τ) Φ(b) Ψ(b') w_cone(b) w_cone(b') on a polar grid.
/// Inputs are indexed by full grid nodes.
pub fn cone_pairing(
    params: &ConeKernelParams,
    grid: &BaseGrid,
    phi: &[f64],
    psi: &[f64],
    tau: f64,
    chi: &[f64],
) -> Result<f64> {
    if grid.kind != GridKind::PolarWedge {
        return Err(invalid("cone pairing needs a polar grid"));
    }
    check_dim(grid.len(), phi.len())?;
    check_dim(grid.len(), psi.len())?;
    check_dim(grid.len(), chi.len())?;
    let nt = grid.n1();
    let w = &grid.cone_weights;
    let a: Vec<f64> = (0..grid.len()).map(|i| chi[i] * phi[i] * w[i]).collect();
    let b: Vec<f64> = (0..grid.len()).map(|i| chi[i] * psi[i] * w[i]).collect();
    let rings_a: Vec<usize> = (0..grid.n0()).filter(|&i| (0..nt).any(|j| a[i * nt + j] != 0.0)).collect();
    let rings_b: Vec<usize> = (0..grid.n0()).filter(|&i| (0..nt).any(|j| b[i * nt + j] != 0.0)).collect();
    let mut total = 0.0;
    let mut cache: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
    for &i in &rings_a {
        for &k in &rings_b {
            let key = (i.min(k), i.max(k));
            if !cache.contains_key(&key) {
                let (r, rp) = (grid.c0[i], grid.c0[k]);
                let series = AngularSeries::new(params, r * rp / (2.0 * tau)).map_err(|e| {
                    invalid(format!("cone series failed for rings ({i}, {k}) at r = {r:.4e}, r' = {rp:.4e}: {e}"))
                })?;
                let table: Vec<f64> = (0..nt)
                    .map(|d| kernel_from_series(params.alpha, r, rp, tau, &series, 2.0 * PI * d as f64 / nt as f64))
                    .collect();
                cache.insert(key, table);
            }
            let table = &cache[&key];
            for j in 0..nt {
                let av = a[i * nt + j];
                if av == 0.0 {
                    continue;
                }
                let mut acc = 0.0;
                for l in 0..nt {
                    let bv = b[k * nt + l];
                    if bv != 0.0 {
                        acc += table[(l + nt - j) % nt] * bv;
                    }
                }
                total += av * acc;
            }
        }
    }
    Ok(total)
}

#[derive(Clone, Debug, Serialize)]
pub struct GaussianBoundReport {
    pub alpha: f64,
    /// Fitted constants in 0 ≤ K ≤ (C/τ) exp(−d²/(cτ)).
    pub c_const: f64,
    pub c_rate: f64,
    pub min_scaled_kernel: f64,
    pub bound_holds: bool,
    pub within_envelope: bool,
    /// sup τ^{3/2}|∂_r K| by central differences.
    pub radial_derivative_sup: f64,
    pub samples: usize,
}

/// Fit the minimal Gaussian envelope through the upper convex hull of (d²/τ, ln τK).
pub fn verify_gaussian_bound(
    params: &ConeKernelParams,
    samples: &[(f64, f64, f64, f64)],
    taus: &[f64],
) -> Result<GaussianBoundReport> {
    if samples.is_empty() || taus.is_empty() {
        return Err(invalid("gaussian bound needs samples and taus"));
    }
    let mut pts = Vec::new();
    let mut kmin = f64::INFINITY;
    let mut dsup: f64 = 0.0;
    for &tau in taus {
        for &(r, t, rp, tp) in samples {
            let k = cone_kernel(params, r, t, rp, tp, tau)?;
            let scale = 1.0 / (4.0 * PI * params.alpha * tau);
            kmin = kmin.min(k / scale);
            if k < -1e-12 * scale {
                return Err(invalid(format!("negative kernel {k:.3e} at ({r}, {t}, {rp}, {tp}, τ={tau})")));
            }
            let d = cone_distance(params.alpha, r, t, rp, tp);
            if k > 0.0 {
                pts.push((d * d / tau, (tau * k).ln()));
            }
            let h = 1e-5 * r;
            let kp = cone_kernel(params, r + h, t, rp, tp, tau)?;
            let km = cone_kernel(params, r - h, t, rp, tp, tau)?;
            dsup = dsup.max(tau.powf(1.5) * ((kp - km) / (2.0 * h)).abs());
        }
    }
    let (slope, intercept) = upper_hull_support(&pts)?;
    let c_rate = -1.0 / slope;
    let c_const = intercept.exp();
    let holds = pts.iter().all(|&(z, y)| y <= intercept + slope * z + 1e-10 * (1.0 + y.abs()));
    Ok(GaussianBoundReport {
        alpha: params.alpha,
        c_const,
        c_rate,
        min_scaled_kernel: kmin,
        bound_holds: holds && kmin >= -1e-12,
        within_envelope: c_const <= 10.0 && c_rate <= 8.0,
        radial_derivative_sup: dsup,
        samples: pts.len(),
    })
}

/// Supporting line of the upper convex hull at the mean abscissa.
fn upper_hull_support(pts: &[(f64, f64)]) -> Result<(f64, f64)> {
    let mut p = pts.to_vec();
    p.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.partial_cmp(&b.1).unwrap()));
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for &q in &p {
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            let cross = (b.0 - a.0) * (q.1 - a.1) - (b.1 - a.1) * (q.0 - a.0);
            if cross >= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(q);
    }
    if hull.len() < 2 {
        return Err(invalid("gaussian fit needs samples at two or more distances"));
    }
    let zbar = pts.iter().map(|q| q.0).sum::<f64>() / pts.len() as f64;
    let mut k = 0;
    while k + 2 < hull.len() && hull[k + 1].0 < zbar {
        k += 1;
    }
    let (a, b) = (hull[k], hull[k + 1]);
    let slope = (b.1 - a.1) / (b.0 - a.0);
    if !(slope < 0.0) {
        return Err(invalid("gaussian fit found a non-decaying envelope"));
    }
    Ok((slope, a.1 - slope * a.0))
}

/// CSV rows (r, theta, rp, thetap, tau, K).
pub fn tabulate(params: &ConeKernelParams, points: &[(f64, f64, f64, f64)], tau: f64) -> Result<String> {
    let mut s = String::from("r,theta,rp,thetap,tau,K\n");
    for &(r, t, rp, tp) in points {
        let k = cone_kernel(params, r, t, rp, tp, tau)?;
        s.push_str(&format!("{r:.10e},{t:.10e},{rp:.10e},{tp:.10e},{tau:.10e},{k:.16e}\n"));
    }
    Ok(s)
}
