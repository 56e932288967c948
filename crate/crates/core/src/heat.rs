//! Heat semigroups e^{-τH}: dense spectral and Lanczos engines, kernel matrices and
//! off-diagonal decay profiles.

use crate::assembly::{Bc, DiscreteOperator};
use crate::error::{check_dim, invalid, Error, Result};
use crate::linalg::{dot, sym_eigen};
use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::Llt;
use faer::{Mat, Side};
use serde::{Deserialize, Serialize};
use std::sync::{Arc, OnceLock};

pub const DEFAULT_DENSE_CAP: usize = 3000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KrylovKind {
    /// Lanczos on H itself with time stepping.
    Polynomial,
    /// Lanczos on (I + γH)⁻¹ with a sparse Cholesky factor of M + γS.
    ShiftInvert { gamma: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KrylovParams {
    pub max_dim: usize,
    pub tol: f64,
    pub kind: KrylovKind,
}

impl Default for KrylovParams {
    fn default() -> Self {
        KrylovParams { max_dim: 60, tol: 1e-9, kind: KrylovKind::ShiftInvert { gamma: 0.02 } }
    }
}

impl KrylovParams {
    pub fn polynomial() -> Self {
        KrylovParams { max_dim: 60, tol: 1e-9, kind: KrylovKind::Polynomial }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineMode {
    DenseSpectral,
    Krylov,
}

pub struct Spectral {
    pub eigenvalues: Vec<f64>,
    /// Mass-orthonormal eigenvectors as columns.
    pub vectors: Mat<f64>,
    /// Columns of M^{1/2}·vectors (Euclidean orthonormal).
    sym_vectors: Mat<f64>,
}

pub struct HeatEngine {
    pub op: Arc<DiscreteOperator>,
    pub mode: EngineMode,
    pub spectral: Option<Spectral>,
    pub krylov: KrylovParams,
    sqrt_mass: Vec<f64>,
    factor: OnceLock<std::result::Result<Llt<usize, f64>, String>>,
}

impl std::fmt::Debug for HeatEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HeatEngine").field("dim", &self.op.dim).field("mode", &self.mode).finish()
    }
}

pub fn build_engine(op: Arc<DiscreteOperator>, mode: EngineMode) -> Result<HeatEngine> {
    build_engine_with(op, mode, DEFAULT_DENSE_CAP, KrylovParams::default())
}

pub fn build_engine_with(
    op: Arc<DiscreteOperator>,
    mode: EngineMode,
    dense_cap: usize,
    krylov: KrylovParams,
) -> Result<HeatEngine> {
    if !(krylov.tol > 0.0) || krylov.max_dim < 2 {
        return Err(invalid("krylov parameters need tol > 0 and max_dim >= 2"));
    }
    if let KrylovKind::ShiftInvert { gamma } = krylov.kind {
        if !(gamma > 0.0) {
            return Err(invalid("shift-invert gamma must be > 0"));
        }
    }
    let sqrt_mass: Vec<f64> = op.mass.iter().map(|m| m.sqrt()).collect();
    let spectral = match mode {
        EngineMode::DenseSpectral => {
            if op.dim > dense_cap {
                return Err(Error::DimensionCap { dim: op.dim, cap: dense_cap, what: "dense spectral engine".into() });
            }
            let n = op.dim;
            let mut c = Mat::<f64>::zeros(n, n);
            for i in 0..n {
                for (j, v) in op.stiffness.row(i) {
                    c[(i, j)] += v / (sqrt_mass[i] * sqrt_mass[j]);
                }
            }
            let (mut vals, mut w) = sym_eigen(&c)?;
            if op.bc == Bc::Neumann {
                deflate_constants(&sqrt_mass, &mut vals, &mut w);
            }
            let vectors = Mat::from_fn(n, n, |i, j| w[(i, j)] / sqrt_mass[i]);
            Some(Spectral { eigenvalues: vals, vectors, sym_vectors: w })
        }
        EngineMode::Krylov => None,
    };
    Ok(HeatEngine { op, mode, spectral, krylov, sqrt_mass, factor: OnceLock::new() })
}

/// Replace the computed ground state by the exact null vector M^{1/2}1 and
/// re-orthogonalize the remaining modes against it.
fn deflate_constants(sqrt_mass: &[f64], vals: &mut [f64], w: &mut Mat<f64>) {
    let n = sqrt_mass.len();
    let top = vals.last().copied().unwrap_or(0.0).abs().max(1.0);
    if n == 0 || vals[0].abs() > 1e-8 * top {
        return;
    }
    let nz = dot(sqrt_mass, sqrt_mass).sqrt();
    let z: Vec<f64> = sqrt_mass.iter().map(|m| m / nz).collect();
    vals[0] = 0.0;
    for i in 0..n {
        w[(i, 0)] = z[i];
    }
    for k in 1..n {
        for _ in 0..2 {
            let p: f64 = (0..n).map(|i| z[i] * w[(i, k)]).sum();
            for i in 0..n {
                w[(i, k)] -= p * z[i];
            }
        }
        let nk: f64 = (0..n).map(|i| w[(i, k)] * w[(i, k)]).sum::<f64>().sqrt();
        for i in 0..n {
            w[(i, k)] /= nk;
        }
    }
}

impl HeatEngine {
    pub fn dim(&self) -> usize {
        self.op.dim
    }

    pub fn mass(&self) -> &[f64] {
        &self.op.mass
    }

    pub fn eigenvalues(&self) -> Option<&[f64]> {
        self.spectral.as_ref().map(|s| s.eigenvalues.as_slice())
    }

    /// e^{-τH} v.
    pub fn apply(&self, tau: f64, v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.apply_multi(&[tau], v)?.pop().unwrap())
    }

    /// e^{-τH} v for several τ from one factorization or Krylov basis.
    pub fn apply_multi(&self, taus: &[f64], v: &[f64]) -> Result<Vec<Vec<f64>>> {
        check_dim(self.dim(), v.len())?;
        for &t in taus {
            if !(t > 0.0 && t.is_finite()) {
                return Err(invalid(format!("tau must be > 0, got {t}")));
            }
        }
        match self.mode {
            EngineMode::DenseSpectral => Ok(taus.iter().map(|&t| self.dense_apply(t, v)).collect()),
            EngineMode::Krylov => {
                let x: Vec<f64> = v.iter().zip(&self.sqrt_mass).map(|(a, s)| a * s).collect();
                let ys = match self.krylov.kind {
                    KrylovKind::Polynomial => {
                        taus.iter().map(|&t| self.poly_apply(t, &x)).collect::<Result<Vec<_>>>()?
                    }
                    KrylovKind::ShiftInvert { gamma } => self.si_apply(gamma, taus, &x)?,
                };
                Ok(ys
                    .into_iter()
                    .map(|y| y.iter().zip(&self.sqrt_mass).map(|(a, s)| a / s).collect())
                    .collect())
            }
        }
    }

    /// e^{-τH} applied as the dense spectral sum (dense mode only).
    pub fn dense_apply(&self, tau: f64, v: &[f64]) -> Vec<f64> {
        let sp = self.spectral.as_ref().expect("dense mode");
        let n = self.dim();
        let x: Vec<f64> = v.iter().zip(&self.sqrt_mass).map(|(a, s)| a * s).collect();
        let w = &sp.sym_vectors;
        let mut c = vec![0.0; n];
        for k in 0..n {
            let col = w.col(k);
            let mut acc = 0.0;
            for i in 0..n {
                acc += col[i] * x[i];
            }
            c[k] = acc * (-tau * sp.eigenvalues[k]).exp();
        }
        let mut y = vec![0.0; n];
        for k in 0..n {
            if c[k] == 0.0 {
                continue;
            }
            let col = w.col(k);
            for i in 0..n {
                y[i] += col[i] * c[k];
            }
        }
        y.iter().zip(&self.sqrt_mass).map(|(a, s)| a / s).collect()
    }

    fn sym_matvec(&self, x: &[f64]) -> Vec<f64> {
        let t: Vec<f64> = x.iter().zip(&self.sqrt_mass).map(|(a, s)| a / s).collect();
        let y = self.op.stiffness.matvec(&t);
        y.iter().zip(&self.sqrt_mass).map(|(a, s)| a / s).collect()
    }

    fn poly_apply(&self, tau: f64, x: &[f64]) -> Result<Vec<f64>> {
        let beta0 = dot(x, x).sqrt();
        if beta0 == 0.0 {
            return Ok(vec![0.0; x.len()]);
        }
        let tol = self.krylov.tol;
        let mut cur = x.to_vec();
        let mut remaining = tau;
        let mut steps = 0usize;
        while remaining > 0.0 {
            steps += 1;
            if steps > 100_000 {
                return Err(Error::Convergence { what: "polynomial Lanczos stepping".into(), achieved: remaining, target: 0.0 });
            }
            let nb = dot(&cur, &cur).sqrt();
            if nb == 0.0 {
                break;
            }
            let basis = lanczos(|v| self.sym_matvec(v), &cur, self.krylov.max_dim, |_, _| false);
            let m = basis.alpha.len();
            let (theta, s) = tridiag_eigen(&basis.alpha, &basis.beta[..m - 1])?;
            let mut dt = remaining;
            loop {
                // a posteriori estimate β_m |e_mᵀ exp(-dt T) e1|
                let coef: Vec<f64> = (0..m).map(|k| s[(0, k)] * (-dt * theta[k]).exp()).collect();
                let last: f64 = (0..m).map(|k| s[(m - 1, k)] * coef[k]).sum::<f64>();
                let err = if basis.breakdown { 0.0 } else { basis.beta[m - 1] * last.abs() * nb };
                if err <= tol * beta0 * (dt / tau) || dt < 1e-14 * tau {
                    let mut y = vec![0.0; cur.len()];
                    for j in 0..m {
                        let cj: f64 = (0..m).map(|k| s[(j, k)] * coef[k]).sum::<f64>() * nb;
                        for (yi, vi) in y.iter_mut().zip(&basis.v[j]) {
                            *yi += cj * vi;
                        }
                    }
                    cur = y;
                    remaining -= dt;
                    if remaining < 1e-15 * tau {
                        remaining = 0.0;
                    }
                    break;
                }
                dt *= 0.5;
            }
        }
        Ok(cur)
    }

    fn factor(&self, gamma: f64) -> Result<&Llt<usize, f64>> {
        let f = self.factor.get_or_init(|| {
            let a = self.op.stiffness.to_faer_lower_shifted(&self.op.mass, gamma).map_err(|e| e.to_string())?;
            a.sp_cholesky(Side::Lower).map_err(|e| format!("{e:?}"))
        });
        f.as_ref().map_err(|e| Error::Linalg(format!("sparse Cholesky of M + γS: {e}")))
    }

    /// (I + γĤ)⁻¹ x = M^{1/2} (M + γS)⁻¹ M^{1/2} x.
    fn si_solve(&self, llt: &Llt<usize, f64>, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let mut b = Mat::<f64>::from_fn(n, 1, |i, _| x[i] * self.sqrt_mass[i]);
        llt.solve_in_place(b.as_mut());
        (0..n).map(|i| b[(i, 0)] * self.sqrt_mass[i]).collect()
    }

    fn si_apply(&self, gamma: f64, taus: &[f64], x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let beta0 = dot(x, x).sqrt();
        if beta0 == 0.0 {
            return Ok(vec![vec![0.0; x.len()]; taus.len()]);
        }
        let llt = self.factor(gamma)?;
        let tol = self.krylov.tol;
        let mut prev: Option<Vec<Vec<f64>>> = None;
        let mut achieved = f64::INFINITY;
        let mut converged_at = None;
        let basis = lanczos(
            |v| self.si_solve(llt, v),
            x,
            self.krylov.max_dim,
            |alpha, beta| {
                let m = alpha.len();
                if m < 3 {
                    return false;
                }
                let Ok(c) = si_coefficients(alpha, &beta[..m - 1], gamma, taus) else {
                    return false;
                };
                let done = match &prev {
                    Some(p) => {
                        let mut d: f64 = 0.0;
                        for (cn, cp) in c.iter().zip(p) {
                            let diff: f64 = (0..m)
                                .map(|j| {
                                    let a = cn[j];
                                    let b = if j < cp.len() { cp[j] } else { 0.0 };
                                    (a - b) * (a - b)
                                })
                                .sum();
                            d = d.max(diff.sqrt());
                        }
                        achieved = d;
                        d <= tol
                    }
                    None => false,
                };
                prev = Some(c);
                if done {
                    converged_at = Some(m);
                }
                done
            },
        );
        let m = basis.alpha.len();
        if converged_at.is_none() && !basis.breakdown {
            return Err(Error::Convergence { what: "shift-invert Lanczos".into(), achieved, target: tol });
        }
        let coefs = si_coefficients(&basis.alpha, &basis.beta[..m - 1], gamma, taus)?;
        Ok(coefs
            .iter()
            .map(|c| {
                let mut y = vec![0.0; x.len()];
                for j in 0..m {
                    let cj = c[j] * beta0;
                    for (yi, vi) in y.iter_mut().zip(&basis.v[j]) {
                        *yi += cj * vi;
                    }
                }
                y
            })
            .collect())
    }

    /// Dense kernel K(x,y;τ) = Σ e^{-τλ} φ(x) φ(y) (dense mode only).
    pub fn kernel_matrix(&self, tau: f64) -> Result<KernelMatrix> {
        let sp = self
            .spectral
            .as_ref()
            .ok_or_else(|| invalid("kernel_matrix needs a dense spectral engine"))?;
        if !(tau > 0.0) {
            return Err(invalid("tau must be > 0"));
        }
        let n = self.dim();
        let phi = &sp.vectors;
        let scaled = Mat::from_fn(n, n, |i, k| phi[(i, k)] * (-tau * sp.eigenvalues[k]).exp());
        let k = &scaled * phi.transpose();
        Ok(KernelMatrix { tau, entries: k, labels: self.op.labels.clone(), bc: self.op.bc })
    }
}

/// Coefficients (in the Lanczos basis, unscaled by ‖x‖) of exp(-τ(T⁻¹ − I)/γ) e1.
fn si_coefficients(alpha: &[f64], beta: &[f64], gamma: f64, taus: &[f64]) -> Result<Vec<Vec<f64>>> {
    let m = alpha.len();
    let (mu, s) = tridiag_eigen(alpha, beta)?;
    Ok(taus
        .iter()
        .map(|&tau| {
            let w: Vec<f64> = (0..m)
                .map(|k| {
                    let mk = mu[k].max(1e-300);
                    let lam = ((1.0 / mk - 1.0) / gamma).max(0.0);
                    s[(0, k)] * (-tau * lam).exp()
                })
                .collect();
            (0..m).map(|j| (0..m).map(|k| s[(j, k)] * w[k]).sum()).collect()
        })
        .collect())
}

fn tridiag_eigen(alpha: &[f64], beta: &[f64]) -> Result<(Vec<f64>, Mat<f64>)> {
    let m = alpha.len();
    let t = Mat::from_fn(m, m, |i, j| {
        if i == j {
            alpha[i]
        } else if i + 1 == j {
            beta[i]
        } else if j + 1 == i {
            beta[j]
        } else {
            0.0
        }
    });
    sym_eigen(&t)
}

struct LanczosBasis {
    v: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    /// beta[j] couples v_j and v_{j+1}; has the same length as alpha.
    beta: Vec<f64>,
    breakdown: bool,
}

/// Lanczos with full reorthogonalization. `stop(alpha, beta)` is polled after each step.
fn lanczos(
    mut apply: impl FnMut(&[f64]) -> Vec<f64>,
    x: &[f64],
    max_m: usize,
    mut stop: impl FnMut(&[f64], &[f64]) -> bool,
) -> LanczosBasis {
    let nrm = dot(x, x).sqrt();
    let mut v = vec![x.iter().map(|a| a / nrm).collect::<Vec<f64>>()];
    let mut alpha = Vec::new();
    let mut beta = Vec::new();
    let mut breakdown = false;
    for j in 0..max_m {
        let mut w = apply(&v[j]);
        let a = dot(&w, &v[j]);
        alpha.push(a);
        for _pass in 0..2 {
            for vk in &v {
                let c = dot(&w, vk);
                for (wi, vi) in w.iter_mut().zip(vk) {
                    *wi -= c * vi;
                }
            }
        }
        let b = dot(&w, &w).sqrt();
        beta.push(b);
        let scale = alpha.iter().map(|a| a.abs()).fold(0.0, f64::max).max(1e-300);
        if b <= 1e-13 * scale {
            breakdown = true;
            break;
        }
        if stop(&alpha, &beta) {
            break;
        }
        if j + 1 < max_m {
            v.push(w.iter().map(|a| a / b).collect());
        }
    }
    let m = alpha.len();
    v.truncate(m);
    LanczosBasis { v, alpha, beta, breakdown }
}

#[derive(Clone, Debug)]
pub struct KernelMatrix {
    pub tau: f64,
    pub entries: Mat<f64>,
    pub labels: Vec<usize>,
    pub bc: Bc,
}

#[derive(Clone, Debug, Serialize)]
pub struct KernelCheck {
    pub symmetry: f64,
    pub min_entry: f64,
    pub max_row_mass_sum_dev: f64,
    pub max_row_mass_sum: f64,
}

impl KernelMatrix {
    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    /// Σ_y K(x,y) m(y) per row.
    pub fn row_mass_sums(&self, mass: &[f64]) -> Vec<f64> {
        let n = self.dim();
        (0..n).map(|i| (0..n).map(|j| self.entries[(i, j)] * mass[j]).sum()).collect()
    }

    pub fn check(&self, mass: &[f64]) -> KernelCheck {
        let n = self.dim();
        let mut asym: f64 = 0.0;
        let mut kmax: f64 = 0.0;
        let mut kmin = f64::INFINITY;
        for i in 0..n {
            for j in 0..n {
                let a = self.entries[(i, j)];
                asym = asym.max((a - self.entries[(j, i)]).abs());
                kmax = kmax.max(a.abs());
                kmin = kmin.min(a);
            }
        }
        let rs = self.row_mass_sums(mass);
        KernelCheck {
            symmetry: asym / kmax.max(1e-300),
            min_entry: kmin / kmax.max(1e-300),
            max_row_mass_sum_dev: rs.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max),
            max_row_mass_sum: rs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }

    /// Binary row-major float64 plus JSON sidecar.
    pub fn export(&self, dir: &std::path::Path, name: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let n = self.dim();
        let mut bytes = Vec::with_capacity(n * n * 8);
        for i in 0..n {
            for j in 0..n {
                bytes.extend_from_slice(&self.entries[(i, j)].to_le_bytes());
            }
        }
        std::fs::write(dir.join(format!("{name}.f64")), bytes)?;
        let side = serde_json::json!({ "tau": self.tau, "bc": self.bc, "dims": [n, n], "layout": "row-major little-endian f64" });
        std::fs::write(dir.join(format!("{name}.json")), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ProfileBin {
    pub d_lo: f64,
    pub d_hi: f64,
    pub max_abs: f64,
    /// Non-increasing envelope from the far end.
    pub envelope: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct OffDiagonalProfile {
    pub tau: f64,
    pub bins: Vec<ProfileBin>,
    /// Least-squares slope of ln max|K| against −d²/(4τ).
    pub gaussian_slope: f64,
    pub argmax_bin: usize,
}

impl OffDiagonalProfile {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin,d_lo,d_hi,max_abs\n");
        for (k, b) in self.bins.iter().enumerate() {
            s.push_str(&format!("{k},{:.6e},{:.6e},{:.6e}\n", b.d_lo, b.d_hi, b.max_abs));
        }
        s
    }
}

pub fn offdiagonal_profile(kernel: &KernelMatrix, distance: impl Fn(usize, usize) -> f64, n_bins: usize) -> OffDiagonalProfile {
    let n = kernel.dim();
    let mut dmax: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            dmax = dmax.max(distance(i, j));
        }
    }
    let nb = n_bins.max(1);
    let width = (dmax / nb as f64).max(1e-300);
    let mut mx = vec![0.0_f64; nb];
    for i in 0..n {
        for j in 0..n {
            let k = ((distance(i, j) / width) as usize).min(nb - 1);
            mx[k] = mx[k].max(kernel.get(i, j).abs());
        }
    }
    let mut env = mx.clone();
    for k in (0..nb - 1).rev() {
        env[k] = env[k].max(env[k + 1]);
    }
    let bins: Vec<ProfileBin> = (0..nb)
        .map(|k| ProfileBin { d_lo: k as f64 * width, d_hi: (k + 1) as f64 * width, max_abs: mx[k], envelope: env[k] })
        .collect();
    let pts: Vec<(f64, f64)> = bins
        .iter()
        .filter(|b| b.max_abs > 0.0)
        .map(|b| {
            let d = 0.5 * (b.d_lo + b.d_hi);
            (-d * d / (4.0 * kernel.tau), b.max_abs.ln())
        })
        .collect();
    let slope = crate::stats::linear_fit(&pts).map(|f| f.slope).unwrap_or(f64::NAN);
    let argmax_bin = (0..nb).fold(0, |best, k| if mx[k] > mx[best] { k } else { best });
    OffDiagonalProfile { tau: kernel.tau, bins, gaussian_slope: slope, argmax_bin }
}

/// E[e^{-σH} v] for the engine's operator.
pub fn smoothed_energy(engine: &HeatEngine, sigma: f64, v: &[f64]) -> Result<f64> {
    let w = engine.apply(sigma, v)?;
    Ok(engine.op.stiffness.quad_form(&w))
}
