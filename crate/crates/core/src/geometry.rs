//! Conic base charts, flat fiber lattices, collapse schedules and semi-flat perturbations.

use crate::error::{invalid, Error, Result};
use crate::linalg::{small_sym_eigenvalues, small_sym_opnorm};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const GEOMETRY_SCHEMA: &str = "collapse-heat/geometry/v1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeParams {
    pub alpha: f64,
    pub beta: f64,
    pub r0: f64,
    pub q_amplitude: f64,
}

impl ConeParams {
    pub fn new(alpha: f64, beta: f64, r0: f64, q_amplitude: f64) -> Result<ConeParams> {
        let p = ConeParams { alpha, beta, r0, q_amplitude };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(invalid(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(invalid(format!("beta must lie in (0,1], got {}", self.beta)));
        }
        if !(self.r0 > 0.0 && self.r0.is_finite()) {
            return Err(invalid(format!("r0 must be > 0, got {}", self.r0)));
        }
        if !(self.q_amplitude >= 0.0 && self.q_amplitude.is_finite()) {
            return Err(invalid(format!("q_amplitude must be >= 0, got {}", self.q_amplitude)));
        }
        Ok(())
    }

    /// Angular profile of the perturbation q in the orthonormal cone frame; operator norm ≤ 1.
    fn q_shape(theta: f64) -> [[f64; 2]; 2] {
        let c = theta.cos();
        let s2 = 0.5 * (2.0 * theta).sin();
        [[c, s2], [s2, -c]]
    }

    /// q expressed in the orthonormal frame (dr, α r dθ).
    pub fn q_frame(&self, r: f64, theta: f64) -> [[f64; 2]; 2] {
        let a = self.q_amplitude * r.powf(self.beta);
        let m = Self::q_shape(theta);
        [[a * m[0][0], a * m[0][1]], [a * m[1][0], a * m[1][1]]]
    }

    /// Chart components of g_B = dr² + α²r²dθ² + q.
    pub fn metric(&self, r: f64, theta: f64) -> [[f64; 2]; 2] {
        let q = self.q_frame(r, theta);
        let f = [1.0, self.alpha * r];
        let mut g = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                let id = if i == j { 1.0 } else { 0.0 };
                g[i][j] = f[i] * f[j] * (id + q[i][j]);
            }
        }
        g
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    PolarWedge,
    CartesianPatch,
}

/// Radial node placement for polar charts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RadialSpacing {
    Uniform { n_r: usize },
    /// Geometric ladder r_min·2^{j/k} toward the tip, uniform spacing h_out further out.
    Graded { rings_per_octave: usize, h_out: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaseGrid {
    pub kind: GridKind,
    /// Radial (or x) node coordinates.
    pub c0: Vec<f64>,
    /// Angular (or y) node coordinates.
    pub c1: Vec<f64>,
    pub periodic1: bool,
    /// Node points; (r, θ) for polar charts. Index = i·c1.len() + j.
    pub nodes: Vec<[f64; 2]>,
    pub r_min: f64,
    pub params: ConeParams,
    pub quad_weights: Vec<f64>,
    /// Lumped flat-cone weights α r dr dθ.
    pub cone_weights: Vec<f64>,
    pub metric_coeffs: Vec<[[f64; 2]; 2]>,
}

impl BaseGrid {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn n0(&self) -> usize {
        self.c0.len()
    }

    pub fn n1(&self) -> usize {
        self.c1.len()
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.c1.len() + j
    }

    pub fn total_measure(&self) -> f64 {
        self.quad_weights.iter().sum()
    }

    /// Chart metric at an arbitrary point.
    pub fn metric_at(&self, p0: f64, p1: f64) -> [[f64; 2]; 2] {
        match self.kind {
            GridKind::PolarWedge => self.params.metric(p0, p1),
            GridKind::CartesianPatch => [[1.0, 0.0], [0.0, 1.0]],
        }
    }

    /// Spacing of the second coordinate for cell j (periodic wrap for angles).
    pub fn d1(&self, j: usize) -> f64 {
        let n = self.c1.len();
        if self.periodic1 && j + 1 == n {
            2.0 * PI - self.c1[j] + self.c1[0]
        } else {
            self.c1[j + 1] - self.c1[j]
        }
    }

    pub fn n_cells1(&self) -> usize {
        if self.periodic1 {
            self.c1.len()
        } else {
            self.c1.len() - 1
        }
    }

    /// Nodes on the outer boundary (Dirichlet set).
    pub fn outer_boundary(&self) -> Vec<bool> {
        let (n0, n1) = (self.n0(), self.n1());
        let mut b = vec![false; self.len()];
        for i in 0..n0 {
            for j in 0..n1 {
                let on = match self.kind {
                    GridKind::PolarWedge => i + 1 == n0,
                    GridKind::CartesianPatch => i == 0 || i + 1 == n0 || j == 0 || j + 1 == n1,
                };
                b[self.index(i, j)] = on;
            }
        }
        b
    }

    /// Typical grid spacing in physical units.
    pub fn spacing(&self) -> f64 {
        let mut h: f64 = 0.0;
        for w in self.c0.windows(2) {
            h = h.max(w[1] - w[0]);
        }
        if self.kind == GridKind::PolarWedge {
            let r = *self.c0.last().unwrap();
            h = h.max(self.params.alpha * r * 2.0 * PI / self.n1() as f64);
        } else {
            for w in self.c1.windows(2) {
                h = h.max(w[1] - w[0]);
            }
        }
        h
    }

    /// max over nodes of |q| / r^β in the cone frame.
    pub fn measured_q_ratio(&self) -> f64 {
        if self.kind != GridKind::PolarWedge {
            return 0.0;
        }
        self.nodes
            .iter()
            .map(|p| small_sym_opnorm(&self.params.q_frame(p[0], p[1])) / p[0].powf(self.params.beta))
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "schema": GEOMETRY_SCHEMA, "base_grid": self })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<BaseGrid> {
        check_schema(v)?;
        Ok(serde_json::from_value(v["base_grid"].clone())?)
    }
}

fn check_schema(v: &serde_json::Value) -> Result<()> {
    match v.get("schema").and_then(|s| s.as_str()) {
        Some(GEOMETRY_SCHEMA) => Ok(()),
        other => Err(invalid(format!("unexpected schema {other:?}"))),
    }
}

fn check_spd2(g: &[[f64; 2]; 2], where_: String) -> Result<()> {
    let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
    if !(g[0][0] > 0.0 && det > 0.0) || (g[0][1] - g[1][0]).abs() > 1e-14 * g[0][0].abs() {
        return Err(Error::NotPositiveDefinite { location: where_, detail: format!("{g:?}") });
    }
    Ok(())
}

/// Uniform polar grid on [r_min, r0] × [0, 2π).
pub fn build_cone_chart(params: ConeParams, n_r: usize, n_theta: usize, r_min: f64) -> Result<BaseGrid> {
    build_cone_chart_with(params, RadialSpacing::Uniform { n_r }, n_theta, r_min)
}

pub fn radial_nodes(r0: f64, spacing: RadialSpacing, r_min: f64) -> Result<Vec<f64>> {
    match spacing {
        RadialSpacing::Uniform { n_r } => {
            if n_r < 4 {
                return Err(invalid("n_r must be >= 4"));
            }
            let h = (r0 - r_min) / (n_r - 1) as f64;
            let mut r: Vec<f64> = (0..n_r).map(|i| r_min + h * i as f64).collect();
            r[n_r - 1] = r0;
            Ok(r)
        }
        RadialSpacing::Graded { rings_per_octave, h_out } => {
            if rings_per_octave < 1 || !(h_out > 0.0) {
                return Err(invalid("graded spacing needs rings_per_octave >= 1 and h_out > 0"));
            }
            let q = 2f64.powf(1.0 / rings_per_octave as f64);
            let mut r = vec![r_min];
            let mut j = 0;
            loop {
                let cur = r_min * q.powi(j);
                if cur * (q - 1.0) >= h_out || cur * q >= r0 {
                    break;
                }
                j += 1;
                r.push(r_min * q.powi(j));
            }
            let r_sw = *r.last().unwrap();
            let n_out = ((r0 - r_sw) / h_out).round().max(1.0) as usize;
            let h = (r0 - r_sw) / n_out as f64;
            for k in 1..=n_out {
                r.push(r_sw + h * k as f64);
            }
            *r.last_mut().unwrap() = r0;
            if r.len() < 4 {
                return Err(invalid("graded grid has fewer than 4 rings"));
            }
            Ok(r)
        }
    }
}

pub fn build_cone_chart_with(params: ConeParams, spacing: RadialSpacing, n_theta: usize, r_min: f64) -> Result<BaseGrid> {
    params.validate()?;
    if !(r_min > 0.0) {
        return Err(invalid(format!("r_min must be > 0, got {r_min}")));
    }
    if r_min >= params.r0 {
        return Err(invalid(format!("r_min {r_min} must be < r0 {}", params.r0)));
    }
    if n_theta < 4 {
        return Err(invalid("n_theta must be >= 4"));
    }
    let radii = radial_nodes(params.r0, spacing, r_min)?;
    let thetas: Vec<f64> = (0..n_theta).map(|j| 2.0 * PI * j as f64 / n_theta as f64).collect();
    let (n_r, n_t) = (radii.len(), n_theta);
    let mut nodes = Vec::with_capacity(n_r * n_t);
    let mut metric_coeffs = Vec::with_capacity(n_r * n_t);
    for &r in &radii {
        for &t in &thetas {
            nodes.push([r, t]);
            let g = params.metric(r, t);
            check_spd2(&g, format!("node (r={r:.4}, θ={t:.4})"))?;
            metric_coeffs.push(g);
        }
    }
    let mut quad = vec![0.0; n_r * n_t];
    let mut cone = vec![0.0; n_r * n_t];
    let dt = 2.0 * PI / n_t as f64;
    for i in 0..n_r - 1 {
        let dr = radii[i + 1] - radii[i];
        let rm = 0.5 * (radii[i] + radii[i + 1]);
        for j in 0..n_t {
            let tm = thetas[j] + 0.5 * dt;
            let g = params.metric(rm, tm);
            check_spd2(&g, format!("cell center (r={rm:.4}, θ={tm:.4})"))?;
            let vol = (g[0][0] * g[1][1] - g[0][1] * g[1][0]).sqrt() * dr * dt;
            let cvol = params.alpha * rm * dr * dt;
            let j1 = (j + 1) % n_t;
            for idx in [i * n_t + j, i * n_t + j1, (i + 1) * n_t + j, (i + 1) * n_t + j1] {
                quad[idx] += 0.25 * vol;
                cone[idx] += 0.25 * cvol;
            }
        }
    }
    Ok(BaseGrid {
        kind: GridKind::PolarWedge,
        c0: radii,
        c1: thetas,
        periodic1: true,
        nodes,
        r_min,
        params,
        quad_weights: quad,
        cone_weights: cone,
        metric_coeffs,
    })
}

/// Euclidean rectangle [0, lx] × [0, ly] with uniform nodes.
pub fn build_cartesian_patch(lx: f64, ly: f64, nx: usize, ny: usize) -> Result<BaseGrid> {
    if nx < 2 || ny < 2 || !(lx > 0.0 && ly > 0.0) {
        return Err(invalid("cartesian patch needs nx, ny >= 2 and positive extents"));
    }
    let xs: Vec<f64> = (0..nx).map(|i| lx * i as f64 / (nx - 1) as f64).collect();
    let ys: Vec<f64> = (0..ny).map(|j| ly * j as f64 / (ny - 1) as f64).collect();
    let mut nodes = Vec::new();
    for &x in &xs {
        for &y in &ys {
            nodes.push([x, y]);
        }
    }
    let n = nodes.len();
    let mut quad = vec![0.0; n];
    for i in 0..nx - 1 {
        for j in 0..ny - 1 {
            let vol = (xs[i + 1] - xs[i]) * (ys[j + 1] - ys[j]);
            for idx in [i * ny + j, i * ny + j + 1, (i + 1) * ny + j, (i + 1) * ny + j + 1] {
                quad[idx] += 0.25 * vol;
            }
        }
    }
    Ok(BaseGrid {
        kind: GridKind::CartesianPatch,
        c0: xs,
        c1: ys,
        periodic1: false,
        nodes,
        r_min: 0.0,
        params: ConeParams { alpha: 1.0, beta: 1.0, r0: lx.max(ly), q_amplitude: 0.0 },
        cone_weights: quad.clone(),
        quad_weights: quad,
        metric_coeffs: vec![[[1.0, 0.0], [0.0, 1.0]]; n],
    })
}

/// Flat torus R²/(s·B·Z²); the columns of `basis` generate the lattice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiberLattice {
    pub lattice_basis: [[f64; 2]; 2],
    pub scale: f64,
}

pub fn build_fiber_lattice(basis: [[f64; 2]; 2], scale: f64) -> Result<FiberLattice> {
    let det = basis[0][0] * basis[1][1] - basis[0][1] * basis[1][0];
    if !det.is_finite() || det.abs() < 1e-12 {
        return Err(invalid("lattice basis is singular"));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(invalid(format!("scale must be > 0, got {scale}")));
    }
    Ok(FiberLattice { lattice_basis: basis, scale })
}

impl FiberLattice {
    pub fn det(&self) -> f64 {
        let b = self.lattice_basis;
        b[0][0] * b[1][1] - b[0][1] * b[1][0]
    }

    pub fn area(&self) -> f64 {
        self.scale * self.scale * self.det().abs()
    }

    /// Generators s·B e_k.
    pub fn generators(&self) -> [[f64; 2]; 2] {
        let b = self.lattice_basis;
        let s = self.scale;
        [[s * b[0][0], s * b[1][0]], [s * b[0][1], s * b[1][1]]]
    }

    /// h = s² BᵀB in lattice coordinates φ ∈ [0,1)².
    pub fn metric(&self) -> [[f64; 2]; 2] {
        let g = self.generators();
        let d = |a: [f64; 2], b: [f64; 2]| a[0] * b[0] + a[1] * b[1];
        [[d(g[0], g[0]), d(g[0], g[1])], [d(g[1], g[0]), d(g[1], g[1])]]
    }

    pub fn with_scale(&self, scale: f64) -> FiberLattice {
        FiberLattice { lattice_basis: self.lattice_basis, scale }
    }

    /// Diameter of the flat torus, the covering radius of the lattice.
    pub fn diameter(&self) -> f64 {
        let g = self.generators();
        let (mut u, mut v) = (g[0], g[1]);
        let n2 = |a: [f64; 2]| a[0] * a[0] + a[1] * a[1];
        let dt = |a: [f64; 2], b: [f64; 2]| a[0] * b[0] + a[1] * b[1];
        // Lagrange–Gauss reduction
        loop {
            if n2(u) > n2(v) {
                std::mem::swap(&mut u, &mut v);
            }
            let m = (dt(u, v) / n2(u)).round();
            if m == 0.0 {
                break;
            }
            v = [v[0] - m * u[0], v[1] - m * u[1]];
        }
        if dt(u, v) < 0.0 {
            v = [-v[0], -v[1]];
        }
        let w = [v[0] - u[0], v[1] - u[1]];
        let (a, b, c) = (n2(u).sqrt(), n2(v).sqrt(), n2(w).sqrt());
        let area2 = (u[0] * v[1] - u[1] * v[0]).abs();
        a * b * c / (2.0 * area2)
    }

    /// Lowest `count` Laplace eigenvalues 4π²|s⁻¹B⁻ᵀm|², m ∈ Z², with multiplicity.
    pub fn spectrum(&self, count: usize) -> Vec<f64> {
        let b = self.lattice_basis;
        let det = self.det();
        // B⁻ᵀ
        let bit = [[b[1][1] / det, -b[1][0] / det], [-b[0][1] / det, b[0][0] / det]];
        let s2 = self.scale * self.scale;
        let mut radius = 4i64;
        loop {
            let mut ev = Vec::new();
            for m1 in -radius..=radius {
                for m2 in -radius..=radius {
                    let k0 = bit[0][0] * m1 as f64 + bit[0][1] * m2 as f64;
                    let k1 = bit[1][0] * m1 as f64 + bit[1][1] * m2 as f64;
                    ev.push(4.0 * PI * PI * (k0 * k0 + k1 * k1) / s2);
                }
            }
            ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ev.truncate(count.max(2));
            // every eigenvalue below the box's guaranteed coverage is complete
            let kmin = self.dual_box_coverage(radius);
            if ev.last().copied().unwrap_or(0.0) < kmin {
                ev.truncate(count);
                return ev;
            }
            radius *= 2;
        }
    }

    /// Lower bound on the eigenvalue of any dual vector outside the box |m_i| ≤ radius.
    fn dual_box_coverage(&self, radius: i64) -> f64 {
        // |B⁻ᵀm| ≥ |m|_∞ / ‖Bᵀ‖_op, and |m|_∞ > radius outside the box
        let b = self.lattice_basis;
        let bt = [[b[0][0], b[1][0]], [b[0][1], b[1][1]]];
        let mut btb = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                btb[i][j] = bt[0][i] * bt[0][j] + bt[1][i] * bt[1][j];
            }
        }
        let op = small_sym_eigenvalues(&btb)[1].sqrt();
        let k = (radius + 1) as f64 / op;
        4.0 * PI * PI * k * k / (self.scale * self.scale)
    }

    pub fn lambda1(&self) -> f64 {
        self.spectrum(2)[1]
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "schema": GEOMETRY_SCHEMA, "fiber_lattice": self })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<FiberLattice> {
        check_schema(v)?;
        let l: FiberLattice = serde_json::from_value(v["fiber_lattice"].clone())?;
        build_fiber_lattice(l.lattice_basis, l.scale)
    }
}

/// π²/diam², the diameter gap bound with c₀ = π².
pub fn torus_gap_lower_bound(lattice: &FiberLattice) -> f64 {
    let d = lattice.diameter();
    PI * PI / (d * d)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Gauge {
    /// ε(s) = c_amp · exp(−c_rate / s)
    Exponential { c_amp: f64, c_rate: f64 },
    /// ε(s) = c_amp · s^power
    Polynomial { c_amp: f64, power: f64 },
    Custom,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStep {
    pub s: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseSchedule {
    pub steps: Vec<ScheduleStep>,
    pub gauge: Gauge,
}

impl CollapseSchedule {
    pub fn exponential(scales: &[f64], c_amp: f64, c_rate: f64) -> Result<CollapseSchedule> {
        let steps = scales.iter().map(|&s| ScheduleStep { s, epsilon: c_amp * (-c_rate / s).exp() }).collect();
        let sch = CollapseSchedule { steps, gauge: Gauge::Exponential { c_amp, c_rate } };
        sch.validate()?;
        Ok(sch)
    }

    pub fn custom(steps: Vec<ScheduleStep>) -> Result<CollapseSchedule> {
        let sch = CollapseSchedule { steps, gauge: Gauge::Custom };
        sch.validate()?;
        Ok(sch)
    }

    pub fn gauge_value(&self, s: f64) -> Option<f64> {
        match self.gauge {
            Gauge::Exponential { c_amp, c_rate } => Some(c_amp * (-c_rate / s).exp()),
            Gauge::Polynomial { c_amp, power } => Some(c_amp * s.powf(power)),
            Gauge::Custom => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(invalid("schedule has no steps"));
        }
        for w in self.steps.windows(2) {
            if !(w[1].s < w[0].s) {
                return Err(invalid(format!("s must decrease strictly: {} then {}", w[0].s, w[1].s)));
            }
        }
        for st in &self.steps {
            if !(st.s > 0.0) || !(st.epsilon >= 0.0) {
                return Err(invalid(format!("bad schedule step {st:?}")));
            }
        }
        match self.gauge {
            Gauge::Exponential { c_amp, c_rate } if !(c_amp > 0.0 && c_rate > 0.0) => {
                return Err(invalid("exponential gauge needs C, c > 0"));
            }
            _ => {}
        }
        for st in &self.steps {
            if let Some(e) = self.gauge_value(st.s) {
                if (st.epsilon - e).abs() > 1e-12 * e.abs().max(1e-300) {
                    return Err(invalid(format!("stored epsilon {} does not match gauge value {e}", st.epsilon)));
                }
            }
        }
        Ok(())
    }

    /// True if ε does not increase along the schedule.
    pub fn epsilon_nonincreasing(&self) -> bool {
        self.steps.windows(2).all(|w| w[1].epsilon <= w[0].epsilon)
    }
}

/// Which blocks of the normalized 4×4 perturbation are populated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationProfile {
    pub horizontal: bool,
    pub vertical: bool,
    pub coupling: bool,
    /// Include fiber-dependent modes.
    pub fiber_varying: bool,
    /// Modes per tensor component.
    pub modes: usize,
}

impl Default for PerturbationProfile {
    fn default() -> Self {
        PerturbationProfile { horizontal: true, vertical: true, coupling: true, fiber_varying: true, modes: 3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationField {
    pub c1_norm_target: f64,
    pub profile: PerturbationProfile,
    pub seed: u64,
}

impl PerturbationField {
    pub fn zero() -> PerturbationField {
        PerturbationField { c1_norm_target: 0.0, profile: PerturbationProfile::default(), seed: 0 }
    }
}

/// Index of the upper-triangular component (a,b) of a symmetric 4×4 tensor.
pub const COMPONENTS: [(usize, usize); 10] =
    [(0, 0), (0, 1), (1, 1), (2, 2), (2, 3), (3, 3), (0, 2), (0, 3), (1, 2), (1, 3)];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct Mode {
    comp: usize,
    coef: f64,
    radial_k: f64,
    radial_phase: f64,
    ang_m: u32,
    ang_phase: f64,
    fiber_m: [i32; 2],
    fiber_phase: f64,
}

/// Band-limited random symmetric tensor field Ẽ(r, θ, φ) in the orthonormal frame of g^Π.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    modes: Vec<Mode>,
    r0: f64,
    pub amplitude: f64,
}

impl FieldSpec {
    pub fn random(profile: &PerturbationProfile, seed: u64, r0: f64) -> FieldSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut modes = Vec::new();
        for (c, &(a, b)) in COMPONENTS.iter().enumerate() {
            let block_on = if a < 2 && b < 2 {
                profile.horizontal
            } else if a >= 2 && b >= 2 {
                profile.vertical
            } else {
                profile.coupling
            };
            if !block_on {
                continue;
            }
            for _ in 0..profile.modes {
                let radial_k: f64 = rng.random_range(0..3) as f64;
                let ang_m: u32 = rng.random_range(0..3);
                let weight = 1.0 / (1.0 + radial_k * radial_k + (ang_m * ang_m) as f64);
                modes.push(Mode {
                    comp: c,
                    coef: rng.random_range(-1.0..1.0) * weight,
                    radial_k,
                    radial_phase: rng.random_range(0.0..2.0 * PI),
                    ang_m,
                    ang_phase: rng.random_range(0.0..2.0 * PI),
                    fiber_m: [0, 0],
                    fiber_phase: 0.0,
                });
                if profile.fiber_varying {
                    let choices = [[1, 0], [0, 1], [1, 1], [1, -1]];
                    let fm = choices[rng.random_range(0..4)];
                    modes.push(Mode {
                        comp: c,
                        coef: rng.random_range(-1.0..1.0) * weight,
                        radial_k,
                        radial_phase: rng.random_range(0.0..2.0 * PI),
                        ang_m,
                        ang_phase: rng.random_range(0.0..2.0 * PI),
                        fiber_m: fm,
                        fiber_phase: rng.random_range(0.0..2.0 * PI),
                    });
                }
            }
        }
        FieldSpec { modes, r0, amplitude: 1.0 }
    }

    pub fn zero() -> FieldSpec {
        FieldSpec { modes: Vec::new(), r0: 1.0, amplitude: 0.0 }
    }

    pub fn scaled(&self, amplitude: f64) -> FieldSpec {
        FieldSpec { modes: self.modes.clone(), r0: self.r0, amplitude }
    }

    pub fn is_zero(&self) -> bool {
        self.amplitude == 0.0 || self.modes.is_empty()
    }

    /// Ẽ at (r, θ, φ1, φ2), scaled by the amplitude.
    pub fn eval(&self, r: f64, theta: f64, phi: [f64; 2]) -> [[f64; 4]; 4] {
        let mut comp = [0.0; 10];
        if !self.is_zero() {
            let x = r / self.r0;
            for m in &self.modes {
                let mut v = m.coef * (PI * m.radial_k * x + m.radial_phase).cos();
                if m.ang_m > 0 {
                    v *= x.powi(m.ang_m as i32) * (m.ang_m as f64 * theta + m.ang_phase).cos();
                } else {
                    v *= m.ang_phase.cos();
                }
                if m.fiber_m != [0, 0] {
                    let arg = 2.0 * PI * (m.fiber_m[0] as f64 * phi[0] + m.fiber_m[1] as f64 * phi[1]);
                    v *= (arg + m.fiber_phase).cos();
                }
                comp[m.comp] += v;
            }
        }
        let mut e = [[0.0; 4]; 4];
        for (c, &(a, b)) in COMPONENTS.iter().enumerate() {
            e[a][b] = self.amplitude * comp[c];
            e[b][a] = self.amplitude * comp[c];
        }
        e
    }
}

/// Product-grid description used to sample and measure perturbations.
#[derive(Clone, Copy, Debug)]
pub struct ProductShape<'a> {
    pub base: &'a BaseGrid,
    pub lattice: &'a FiberLattice,
    pub n_f: usize,
}

impl ProductShape<'_> {
    pub fn dim(&self) -> usize {
        self.base.len() * self.n_f * self.n_f
    }

    /// 4×4 product metric g^Π at a base point.
    pub fn product_metric(&self, r: f64, theta: f64) -> [[f64; 4]; 4] {
        let gb = self.base.metric_at(r, theta);
        let h = self.lattice.metric();
        let mut g = [[0.0; 4]; 4];
        for i in 0..2 {
            for j in 0..2 {
                g[i][j] = gb[i][j];
                g[2 + i][2 + j] = h[i][j];
            }
        }
        g
    }

    pub fn fiber_point(&self, f: usize) -> [f64; 2] {
        let n = self.n_f as f64;
        [(f / self.n_f) as f64 / n, (f % self.n_f) as f64 / n]
    }
}

/// Sampled field with its measured norms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledPerturbation {
    pub spec: FieldSpec,
    pub target: f64,
    pub measured_c1: f64,
    pub measured_sup: f64,
    pub min_eigenvalue: f64,
    /// Upper-triangular components per product node, order of `COMPONENTS`.
    pub node_values: Vec<[f64; 10]>,
}

/// Discrete C¹ norm: sup |Ẽ| + sup |∇Ẽ| with edge lengths in product-metric units.
/// Returns (c1, sup, min eigenvalue of I + Ẽ over nodes and cell centers).
pub fn measure_c1(shape: &ProductShape, spec: &FieldSpec) -> (f64, f64, f64, Vec<[f64; 10]>) {
    let base = shape.base;
    let nf = shape.n_f;
    let nfib = nf * nf;
    let (n0, n1) = (base.n0(), base.n1());
    let mut vals: Vec<[[f64; 4]; 4]> = Vec::with_capacity(shape.dim());
    for p in &base.nodes {
        for f in 0..nfib {
            vals.push(spec.eval(p[0], p[1], shape.fiber_point(f)));
        }
    }
    let mut sup: f64 = 0.0;
    let mut grad_sup: f64 = 0.0;
    let mut min_ev = f64::INFINITY;
    let h = shape.lattice.metric();
    let hf = [(h[0][0]).sqrt() / nf as f64, (h[1][1]).sqrt() / nf as f64];
    let diff_norm = |a: &[[f64; 4]; 4], b: &[[f64; 4]; 4]| {
        let mut d = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                d[i][j] = a[i][j] - b[i][j];
            }
        }
        small_sym_opnorm(&d)
    };
    for i in 0..n0 {
        for j in 0..n1 {
            let b = base.index(i, j);
            let g = base.metric_coeffs[b];
            for k in 0..nf {
                for l in 0..nf {
                    let f = k * nf + l;
                    let me = &vals[b * nfib + f];
                    sup = sup.max(small_sym_opnorm(me));
                    let mut ipe = *me;
                    for (d, row) in ipe.iter_mut().enumerate() {
                        row[d] += 1.0;
                    }
                    min_ev = min_ev.min(small_sym_eigenvalues(&ipe)[0]);
                    let mut g2 = 0.0;
                    if i + 1 < n0 {
                        let o = &vals[base.index(i + 1, j) * nfib + f];
                        let len = g[0][0].sqrt() * (base.c0[i + 1] - base.c0[i]);
                        g2 += (diff_norm(o, me) / len).powi(2);
                    }
                    if base.periodic1 || j + 1 < n1 {
                        let j1 = (j + 1) % n1;
                        let o = &vals[base.index(i, j1) * nfib + f];
                        let len = g[1][1].sqrt() * base.d1(j);
                        g2 += (diff_norm(o, me) / len).powi(2);
                    }
                    let o = &vals[b * nfib + ((k + 1) % nf) * nf + l];
                    g2 += (diff_norm(o, me) / hf[0]).powi(2);
                    let o = &vals[b * nfib + k * nf + (l + 1) % nf];
                    g2 += (diff_norm(o, me) / hf[1]).powi(2);
                    grad_sup = grad_sup.max(g2.sqrt());
                }
            }
        }
    }
    // cell centers are where assembly evaluates the metric
    for i in 0..n0 - 1 {
        let rm = 0.5 * (base.c0[i] + base.c0[i + 1]);
        for j in 0..base.n_cells1() {
            let tm = base.c1[j] + 0.5 * base.d1(j);
            for k in 0..nf {
                for l in 0..nf {
                    let phi = [(k as f64 + 0.5) / nf as f64, (l as f64 + 0.5) / nf as f64];
                    let mut e = spec.eval(rm, tm, phi);
                    for (d, row) in e.iter_mut().enumerate() {
                        row[d] += 1.0;
                    }
                    min_ev = min_ev.min(small_sym_eigenvalues(&e)[0]);
                }
            }
        }
    }
    let comps = vals
        .iter()
        .map(|e| {
            let mut c = [0.0; 10];
            for (n, &(a, b)) in COMPONENTS.iter().enumerate() {
                c[n] = e[a][b];
            }
            c
        })
        .collect();
    (sup + grad_sup, sup, min_ev, comps)
}

/// Sample Ẽ with the given profile and scale it to the target discrete C¹ norm.
pub fn sample_perturbation(shape: &ProductShape, target: &PerturbationField) -> Result<SampledPerturbation> {
    if !target.c1_norm_target.is_finite() || target.c1_norm_target < 0.0 {
        return Err(invalid("c1_norm_target must be finite and >= 0"));
    }
    let nodes = shape.dim();
    if target.c1_norm_target == 0.0 {
        return Ok(SampledPerturbation {
            spec: FieldSpec::zero(),
            target: 0.0,
            measured_c1: 0.0,
            measured_sup: 0.0,
            min_eigenvalue: 1.0,
            node_values: vec![[0.0; 10]; nodes],
        });
    }
    let raw = FieldSpec::random(&target.profile, target.seed, shape.base.params.r0);
    let (raw_c1, _, _, _) = measure_c1(shape, &raw);
    if !(raw_c1 > 0.0) {
        return Err(invalid("perturbation profile has no active components"));
    }
    let spec = raw.scaled(target.c1_norm_target / raw_c1);
    sample_with_spec(shape, spec, target.c1_norm_target)
}

/// Sample a field with a fixed amplitude (no calibration), measuring its C¹ norm.
pub fn sample_with_spec(shape: &ProductShape, spec: FieldSpec, target: f64) -> Result<SampledPerturbation> {
    let (c1, sup, min_ev, node_values) = measure_c1(shape, &spec);
    if !(min_ev > 0.0) {
        return Err(Error::NotPositiveDefinite {
            location: "perturbed total metric".into(),
            detail: format!("λmin(I + Ẽ) = {min_ev:.4}; lower the target"),
        });
    }
    Ok(SampledPerturbation { spec, target, measured_c1: c1, measured_sup: sup, min_eigenvalue: min_ev, node_values })
}
