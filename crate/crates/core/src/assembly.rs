//! Divergence-form assembly of base, fiber and total-space Dirichlet forms, lumped
//! quadrature measures and the disintegration (A_t, ρ_t).

use crate::error::{check_dim, invalid, Error, Result};
use crate::geometry::{
    sample_perturbation, sample_with_spec, BaseGrid, FiberLattice, FieldSpec, GridKind, PerturbationField,
    ProductShape, SampledPerturbation,
};
use crate::linalg::{small_inverse, sym_eigen, CsrMatrix};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const OPERATOR_SCHEMA: &str = "collapse-heat/operator/v1";
pub const DENSE_FALLBACK_DIM: usize = 400;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bc {
    Dirichlet,
    Neumann,
}

/// Symmetric PSD form with diagonal mass. `labels[k]` is the full-grid index of node k.
#[derive(Clone, Debug)]
pub struct DiscreteOperator {
    pub dim: usize,
    pub stiffness: CsrMatrix,
    pub mass: Vec<f64>,
    pub bc: Bc,
    pub labels: Vec<usize>,
    pub full_dim: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct OperatorReport {
    pub symmetry_defect: f64,
    pub min_mass: f64,
    pub min_eigenvalue: Option<f64>,
    pub max_eigenvalue: Option<f64>,
}

impl DiscreteOperator {
    pub fn validate(&self) -> Result<OperatorReport> {
        let norm = self.stiffness.frobenius_norm();
        let sym = self.stiffness.symmetry_defect();
        if sym > 1e-13 * norm {
            return Err(invalid(format!("stiffness not symmetric: defect {sym:.3e}")));
        }
        let min_mass = self.mass.iter().copied().fold(f64::INFINITY, f64::min);
        if !(min_mass > 0.0) {
            return Err(invalid("mass must be positive"));
        }
        let (mut lo, mut hi) = (None, None);
        if self.dim <= DENSE_FALLBACK_DIM {
            let (ev, _) = sym_eigen(&self.stiffness.to_dense())?;
            if ev[0] < -1e-10 * ev[self.dim - 1].abs().max(norm) {
                return Err(invalid(format!("stiffness not PSD: λmin = {:.3e}", ev[0])));
            }
            lo = Some(ev[0]);
            hi = Some(ev[self.dim - 1]);
        }
        Ok(OperatorReport { symmetry_defect: sym, min_mass, min_eigenvalue: lo, max_eigenvalue: hi })
    }

    /// H v = M⁻¹ S v.
    pub fn apply_generator(&self, v: &[f64]) -> Vec<f64> {
        let mut y = self.stiffness.matvec(v);
        for (yi, m) in y.iter_mut().zip(&self.mass) {
            *yi /= m;
        }
        y
    }

    /// Upper bound on the largest generator eigenvalue (Gershgorin on M^{-1/2} S M^{-1/2}).
    pub fn lambda_max_bound(&self) -> f64 {
        let mut best: f64 = 0.0;
        for i in 0..self.dim {
            let s: f64 = self.stiffness.row(i).map(|(j, v)| v.abs() / (self.mass[i] * self.mass[j]).sqrt()).sum();
            best = best.max(s);
        }
        best
    }

    pub fn export(&self, dir: &Path, name: &str, epsilon: Option<f64>) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let header = serde_json::json!({
            "schema": OPERATOR_SCHEMA,
            "dim": self.dim,
            "bc": self.bc,
            "nnz": self.stiffness.nnz(),
            "epsilon": epsilon,
            "triplets": format!("{name}.triplets"),
        });
        std::fs::write(dir.join(format!("{name}.json")), serde_json::to_string_pretty(&header)?)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{name}.triplets")))?);
        for i in 0..self.dim {
            for (j, v) in self.stiffness.row(i) {
                writeln!(f, "{i} {j} {v:.17e}")?;
            }
        }
        writeln!(f, "# mass")?;
        for (i, m) in self.mass.iter().enumerate() {
            writeln!(f, "{i} {m:.17e}")?;
        }
        Ok(())
    }
}

pub fn dirichlet_energy(op: &DiscreteOperator, v: &[f64]) -> Result<f64> {
    check_dim(op.dim, v.len())?;
    Ok(op.stiffness.quad_form(v))
}

/// Per-cell data returned by the coefficient callback.
pub struct CellData<const D: usize> {
    /// Coordinate volume of the cell.
    pub coord_vol: f64,
    pub h: [f64; D],
    /// √det G · G⁻¹ at the cell center.
    pub a: [[f64; D]; D],
    pub sqrt_det: f64,
}

/// Structured tensor-product grid; last axis fastest in the node numbering.
pub struct TensorGrid<const D: usize> {
    pub n: [usize; D],
    pub periodic: [bool; D],
    /// Axes sharing a block id use face-local gradients for their mixed terms.
    pub block: [usize; D],
}

impl<const D: usize> TensorGrid<D> {
    pub fn len(&self) -> usize {
        self.n.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn cells(&self, a: usize) -> usize {
        if self.periodic[a] {
            self.n[a]
        } else {
            self.n[a] - 1
        }
    }

    fn index(&self, idx: &[usize; D]) -> usize {
        let mut k = 0;
        for a in 0..D {
            k = k * self.n[a] + idx[a];
        }
        k
    }

    /// Assemble the stiffness and lumped mass of Σ_cells |c| Σ_ab A_ab ⟨∂_a u ∂_b u⟩_c.
    pub fn assemble(&self, mut cell: impl FnMut(&[usize; D]) -> CellData<D>) -> (CsrMatrix, Vec<f64>) {
        for a in 0..D {
            assert!(!self.periodic[a] || self.n[a] >= 3, "periodic axis needs >= 3 nodes");
        }
        let nv = 1usize << D;
        let ns = 3usize.pow(D as u32);
        let total = self.len();
        let mut stencil = vec![0.0; total * ns];
        let mut touched = vec![false; total * ns];
        let mut mass = vec![0.0; total];
        let mut kloc = vec![0.0; nv * nv];
        let ncell: [usize; D] = std::array::from_fn(|a| self.cells(a));
        let n_cells: usize = ncell.iter().product();
        let mut cidx = [0usize; D];
        let mut gidx = vec![0usize; nv];
        for lin in 0..n_cells {
            let mut rem = lin;
            for a in (0..D).rev() {
                cidx[a] = rem % ncell[a];
                rem /= ncell[a];
            }
            let cd = cell(&cidx);
            kloc.iter_mut().for_each(|x| *x = 0.0);
            local_matrix(&cd, &self.block, &mut kloc);
            for (v, g) in gidx.iter_mut().enumerate() {
                let mut idx = [0usize; D];
                for a in 0..D {
                    idx[a] = (cidx[a] + ((v >> a) & 1)) % self.n[a];
                }
                *g = self.index(&idx);
            }
            let m = cd.coord_vol * cd.sqrt_det / nv as f64;
            for v in 0..nv {
                mass[gidx[v]] += m;
                for w in 0..nv {
                    let val = kloc[v * nv + w];
                    if val == 0.0 && v != w {
                        continue;
                    }
                    let mut slot = 0;
                    for a in 0..D {
                        let off = ((w >> a) & 1) as isize - ((v >> a) & 1) as isize;
                        slot = slot * 3 + (off + 1) as usize;
                    }
                    stencil[gidx[v] * ns + slot] += val;
                    touched[gidx[v] * ns + slot] = true;
                }
            }
        }
        let mut rows = Vec::with_capacity(total);
        let mut idx = [0usize; D];
        for p in 0..total {
            let mut rem = p;
            for a in (0..D).rev() {
                idx[a] = rem % self.n[a];
                rem /= self.n[a];
            }
            let mut row = Vec::new();
            for s in 0..ns {
                if !touched[p * ns + s] {
                    continue;
                }
                let mut q = [0usize; D];
                let mut sr = s;
                for a in (0..D).rev() {
                    let off = (sr % 3) as isize - 1;
                    sr /= 3;
                    q[a] = ((idx[a] as isize + off).rem_euclid(self.n[a] as isize)) as usize;
                }
                row.push((self.index(&q), stencil[p * ns + s]));
            }
            rows.push(row);
        }
        (CsrMatrix::from_rows(total, rows), mass)
    }
}

fn local_matrix<const D: usize>(cd: &CellData<D>, block: &[usize; D], k: &mut [f64]) {
    let nv = 1usize << D;
    let vol = cd.coord_vol;
    let ne = (nv / 2) as f64;
    // diagonal terms: mean over edges of squared differences
    for a in 0..D {
        let c = vol * cd.a[a][a] / (cd.h[a] * cd.h[a] * ne);
        for v in 0..nv {
            if (v >> a) & 1 == 0 {
                let w = v | (1 << a);
                k[v * nv + v] += c;
                k[w * nv + w] += c;
                k[v * nv + w] -= c;
                k[w * nv + v] -= c;
            }
        }
    }
    let mut ga = vec![0.0; nv];
    let mut gb = vec![0.0; nv];
    for a in 0..D {
        for b in a + 1..D {
            let coef = cd.a[a][b];
            if coef == 0.0 {
                continue;
            }
            if block[a] == block[b] {
                // face-local gradients, averaged over the 2^{D-2} faces
                let nf = (1usize << (D - 2)) as f64;
                for base in 0..nv {
                    if (base >> a) & 1 == 1 || (base >> b) & 1 == 1 {
                        continue;
                    }
                    ga.iter_mut().for_each(|x| *x = 0.0);
                    gb.iter_mut().for_each(|x| *x = 0.0);
                    let (v00, v10, v01, v11) = (base, base | 1 << a, base | 1 << b, base | 1 << a | 1 << b);
                    let ia = 0.5 / cd.h[a];
                    let ib = 0.5 / cd.h[b];
                    ga[v10] += ia;
                    ga[v00] -= ia;
                    ga[v11] += ia;
                    ga[v01] -= ia;
                    gb[v01] += ib;
                    gb[v00] -= ib;
                    gb[v11] += ib;
                    gb[v10] -= ib;
                    add_sym_outer(k, nv, &ga, &gb, vol * coef / nf);
                }
            } else {
                ga.iter_mut().for_each(|x| *x = 0.0);
                gb.iter_mut().for_each(|x| *x = 0.0);
                for v in 0..nv {
                    if (v >> a) & 1 == 0 {
                        let w = v | 1 << a;
                        ga[w] += 1.0 / (cd.h[a] * ne);
                        ga[v] -= 1.0 / (cd.h[a] * ne);
                    }
                    if (v >> b) & 1 == 0 {
                        let w = v | 1 << b;
                        gb[w] += 1.0 / (cd.h[b] * ne);
                        gb[v] -= 1.0 / (cd.h[b] * ne);
                    }
                }
                add_sym_outer(k, nv, &ga, &gb, vol * coef);
            }
        }
    }
}

fn add_sym_outer(k: &mut [f64], nv: usize, ga: &[f64], gb: &[f64], c: f64) {
    for v in 0..nv {
        if ga[v] == 0.0 && gb[v] == 0.0 {
            continue;
        }
        for w in 0..nv {
            k[v * nv + w] += c * (ga[v] * gb[w] + gb[v] * ga[w]);
        }
    }
}

fn sqrt_det_inv<const D: usize>(g: &[[f64; D]; D], location: impl Fn() -> String) -> Result<(f64, [[f64; D]; D])> {
    let (det, inv) = small_inverse(g).map_err(|_| Error::NotPositiveDefinite { location: location(), detail: "singular".into() })?;
    if !(det > 0.0) || !(g[0][0] > 0.0) {
        return Err(Error::NotPositiveDefinite { location: location(), detail: format!("det = {det:.3e}") });
    }
    let sd = det.sqrt();
    let mut a = [[0.0; D]; D];
    for i in 0..D {
        for j in 0..D {
            a[i][j] = sd * 0.5 * (inv[i][j] + inv[j][i]);
        }
    }
    Ok((sd, a))
}

fn restrict_op(full: CsrMatrix, mass: Vec<f64>, keep: Vec<usize>, bc: Bc) -> DiscreteOperator {
    let full_dim = full.n;
    let stiffness = if keep.len() == full_dim { full } else { full.restrict(&keep) };
    let mass = keep.iter().map(|&i| mass[i]).collect();
    DiscreteOperator { dim: keep.len(), stiffness, mass, bc, labels: keep, full_dim }
}

/// Uniform 1-D chain on [0, length].
pub fn assemble_interval(n: usize, length: f64, bc: Bc) -> Result<DiscreteOperator> {
    if n < 3 {
        return Err(invalid("interval needs >= 3 nodes"));
    }
    let h = length / (n - 1) as f64;
    let grid = TensorGrid::<1> { n: [n], periodic: [false], block: [0] };
    let (s, m) = grid.assemble(|_| CellData { coord_vol: h, h: [h], a: [[1.0]], sqrt_det: 1.0 });
    let keep: Vec<usize> = match bc {
        Bc::Neumann => (0..n).collect(),
        Bc::Dirichlet => (1..n - 1).collect(),
    };
    Ok(restrict_op(s, m, keep, bc))
}

fn base_cell_metric(grid: &BaseGrid, i: usize, j: usize) -> ([f64; 2], [[f64; 2]; 2], f64) {
    let h0 = grid.c0[i + 1] - grid.c0[i];
    let h1 = grid.d1(j);
    let m0 = 0.5 * (grid.c0[i] + grid.c0[i + 1]);
    let m1 = grid.c1[j] + 0.5 * h1;
    (([h0, h1]), grid.metric_at(m0, m1), m0)
}

fn base_keep(grid: &BaseGrid, bc: Bc) -> Vec<usize> {
    match bc {
        Bc::Neumann => (0..grid.len()).collect(),
        Bc::Dirichlet => {
            let b = grid.outer_boundary();
            (0..grid.len()).filter(|&i| !b[i]).collect()
        }
    }
}

pub fn assemble_base(grid: &BaseGrid, bc: Bc) -> Result<DiscreteOperator> {
    let tg = TensorGrid::<2> { n: [grid.n0(), grid.n1()], periodic: [false, grid.periodic1], block: [0, 0] };
    let mut err = None;
    let (s, m) = tg.assemble(|c| {
        let (h, g, _) = base_cell_metric(grid, c[0], c[1]);
        match sqrt_det_inv(&g, || format!("base cell ({}, {})", c[0], c[1])) {
            Ok((sd, a)) => CellData { coord_vol: h[0] * h[1], h, a, sqrt_det: sd },
            Err(e) => {
                err.get_or_insert(e);
                CellData { coord_vol: 0.0, h, a: [[0.0; 2]; 2], sqrt_det: 0.0 }
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    Ok(restrict_op(s, m, base_keep(grid, bc), bc))
}

/// Periodic n_f × n_f Laplacian on the scaled torus in lattice coordinates.
pub fn assemble_fiber(lattice: &FiberLattice, n_f: usize) -> Result<DiscreteOperator> {
    if n_f < 4 {
        return Err(invalid("n_f must be >= 4"));
    }
    let h = lattice.metric();
    let (sd, a) = sqrt_det_inv(&h, || "fiber metric".into())?;
    let hf = 1.0 / n_f as f64;
    let tg = TensorGrid::<2> { n: [n_f, n_f], periodic: [true, true], block: [0, 0] };
    let (s, m) = tg.assemble(|_| CellData { coord_vol: hf * hf, h: [hf, hf], a, sqrt_det: sd });
    Ok(restrict_op(s, m, (0..n_f * n_f).collect(), Bc::Neumann))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AssemblyOptions {
    pub max_dim: usize,
}

impl Default for AssemblyOptions {
    fn default() -> Self {
        AssemblyOptions { max_dim: 2_000_000 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Disintegration {
    /// A_t(b) per kept base node.
    pub fiber_area: Vec<f64>,
    /// ρ_t per kept total node.
    pub density: Vec<f64>,
    pub n_fiber: usize,
}

impl Disintegration {
    pub fn fiber_index(&self, x: usize) -> (usize, usize) {
        (x / self.n_fiber, x % self.n_fiber)
    }

    /// max_b |Σ_f ρ(b,f) ϑ_f − 1| with uniform ϑ_f = 1/n_fiber.
    pub fn normalization_defect(&self) -> f64 {
        let nf = self.n_fiber;
        self.fiber_area
            .iter()
            .enumerate()
            .map(|(b, _)| {
                let s: f64 = self.density[b * nf..(b + 1) * nf].iter().sum::<f64>() / nf as f64;
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn density_deviation(&self) -> f64 {
        self.density.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct FibrationModel {
    pub base: BaseGrid,
    pub fiber: FiberLattice,
    pub n_f: usize,
    pub total_op: DiscreteOperator,
    pub base_op: DiscreteOperator,
    /// Fiber operator at the model's scale.
    pub fiber_op: DiscreteOperator,
    pub disint: Disintegration,
    /// Realized discrete C¹ norm of E_t.
    pub epsilon: f64,
    pub perturbation: SampledPerturbation,
    /// max |m(b,f) / (m_B(b) m_F(f)) − 1|: deviation of the total measure from the product measure.
    pub measure_deviation: f64,
}

impl FibrationModel {
    pub fn n_fiber(&self) -> usize {
        self.n_f * self.n_f
    }

    pub fn base_dim(&self) -> usize {
        self.base_op.dim
    }

    pub fn total_dim(&self) -> usize {
        self.total_op.dim
    }

    pub fn scale(&self) -> f64 {
        self.fiber.scale
    }
}

/// Assemble the total space for g^Π + E with E sampled to the perturbation's C¹ target.
pub fn assemble_total(
    base: &BaseGrid,
    fiber: &FiberLattice,
    n_f: usize,
    perturbation: &PerturbationField,
    bc: Bc,
) -> Result<FibrationModel> {
    assemble_total_with(base, fiber, n_f, perturbation, bc, &AssemblyOptions::default())
}

pub fn assemble_total_with(
    base: &BaseGrid,
    fiber: &FiberLattice,
    n_f: usize,
    perturbation: &PerturbationField,
    bc: Bc,
    opts: &AssemblyOptions,
) -> Result<FibrationModel> {
    let shape = ProductShape { base, lattice: fiber, n_f };
    guard_dim(&shape, opts)?;
    let sampled = sample_perturbation(&shape, perturbation)?;
    assemble_total_sampled(base, fiber, n_f, sampled, bc, opts)
}

/// Assemble with a fixed, already scaled field (no recalibration at this scale).
pub fn assemble_total_fixed(
    base: &BaseGrid,
    fiber: &FiberLattice,
    n_f: usize,
    spec: &FieldSpec,
    bc: Bc,
    opts: &AssemblyOptions,
) -> Result<FibrationModel> {
    let shape = ProductShape { base, lattice: fiber, n_f };
    guard_dim(&shape, opts)?;
    let sampled = sample_with_spec(&shape, spec.clone(), f64::NAN)?;
    assemble_total_sampled(base, fiber, n_f, sampled, bc, opts)
}

fn guard_dim(shape: &ProductShape, opts: &AssemblyOptions) -> Result<()> {
    if shape.n_f < 4 {
        return Err(invalid("n_f must be >= 4"));
    }
    let dim = shape.dim();
    if dim > opts.max_dim {
        return Err(Error::DimensionCap { dim, cap: opts.max_dim, what: "total-space assembly".into() });
    }
    Ok(())
}

fn chol_upper2(g: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let a = g[0][0].sqrt();
    let b = g[0][1] / a;
    let c = (g[1][1] - b * b).sqrt();
    [[a, b], [0.0, c]]
}

fn assemble_total_sampled(
    base: &BaseGrid,
    fiber: &FiberLattice,
    n_f: usize,
    sampled: SampledPerturbation,
    bc: Bc,
    _opts: &AssemblyOptions,
) -> Result<FibrationModel> {
    let base_op = assemble_base(base, bc)?;
    let fiber_op = assemble_fiber(fiber, n_f)?;
    let h = fiber.metric();
    let ff = chol_upper2(&h);
    let hf = 1.0 / n_f as f64;
    let spec = &sampled.spec;
    let zero = spec.is_zero();
    let tg = TensorGrid::<4> {
        n: [base.n0(), base.n1(), n_f, n_f],
        periodic: [false, base.periodic1, true, true],
        block: [0, 0, 1, 1],
    };
    let mut err = None;
    let (s, m) = tg.assemble(|c| {
        let (hb, gb, _) = base_cell_metric(base, c[0], c[1]);
        let hs = [hb[0], hb[1], hf, hf];
        let coord_vol = hb[0] * hb[1] * hf * hf;
        let mut g = [[0.0; 4]; 4];
        if zero {
            for i in 0..2 {
                for j in 0..2 {
                    g[i][j] = gb[i][j];
                    g[2 + i][2 + j] = h[i][j];
                }
            }
        } else {
            let fb = chol_upper2(&gb);
            let mut f = [[0.0; 4]; 4];
            for i in 0..2 {
                for j in 0..2 {
                    f[i][j] = fb[i][j];
                    f[2 + i][2 + j] = ff[i][j];
                }
            }
            let rm = 0.5 * (base.c0[c[0]] + base.c0[c[0] + 1]);
            let tm = base.c1[c[1]] + 0.5 * hb[1];
            let phi = [(c[2] as f64 + 0.5) * hf, (c[3] as f64 + 0.5) * hf];
            let e = spec.eval(rm, tm, phi);
            // G = Fᵀ (I + Ẽ) F
            let mut ie = e;
            for (d, row) in ie.iter_mut().enumerate() {
                row[d] += 1.0;
            }
            for i in 0..4 {
                for j in 0..4 {
                    let mut acc = 0.0;
                    for k in 0..4 {
                        for l in 0..4 {
                            acc += f[k][i] * ie[k][l] * f[l][j];
                        }
                    }
                    g[i][j] = acc;
                }
            }
        }
        match sqrt_det_inv(&g, || format!("total cell {c:?}")) {
            Ok((sd, a)) => CellData { coord_vol, h: hs, a, sqrt_det: sd },
            Err(e) => {
                err.get_or_insert(e);
                CellData { coord_vol: 0.0, h: hs, a: [[0.0; 4]; 4], sqrt_det: 0.0 }
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    let nfib = n_f * n_f;
    let keep: Vec<usize> = base_op.labels.iter().flat_map(|&b| (0..nfib).map(move |f| b * nfib + f)).collect();
    let total_op = restrict_op(s, m, keep, bc);

    let nb = base_op.dim;
    let mut fiber_area = vec![0.0; nb];
    let mut density = vec![0.0; nb * nfib];
    let mut dev: f64 = 0.0;
    for b in 0..nb {
        let mb = base_op.mass[b];
        let sl = &total_op.mass[b * nfib..(b + 1) * nfib];
        let a = sl.iter().sum::<f64>() / mb;
        if !(a > 0.0) {
            return Err(invalid(format!("zero fiber area at base node {b}")));
        }
        fiber_area[b] = a;
        for f in 0..nfib {
            density[b * nfib + f] = sl[f] * nfib as f64 / (mb * a);
            dev = dev.max((sl[f] / (mb * fiber_op.mass[f]) - 1.0).abs());
        }
    }
    Ok(FibrationModel {
        base: base.clone(),
        fiber: *fiber,
        n_f,
        epsilon: sampled.measured_c1,
        total_op,
        base_op,
        fiber_op,
        disint: Disintegration { fiber_area, density, n_fiber: nfib },
        perturbation: SampledPerturbation { node_values: Vec::new(), ..sampled },
        measure_deviation: dev,
    })
}

/// S_B ⊗ M_F + M_B ⊗ S_F, the product form of the unperturbed total space.
pub fn kronecker_sum(base_op: &DiscreteOperator, fiber_op: &DiscreteOperator) -> CsrMatrix {
    let a = CsrMatrix::kron(&base_op.stiffness, &CsrMatrix::diag(&fiber_op.mass));
    let b = CsrMatrix::kron(&CsrMatrix::diag(&base_op.mass), &fiber_op.stiffness);
    a.add(&b, 1.0, 1.0)
}

/// Σ_b m_B(b) u_bᵀ S_F u_b: the fiber-direction part of the product form.
pub fn vertical_energy(model: &FibrationModel, u: &[f64]) -> Result<f64> {
    check_dim(model.total_dim(), u.len())?;
    let nfib = model.n_fiber();
    let mut acc = 0.0;
    for b in 0..model.base_dim() {
        acc += model.base_op.mass[b] * model.fiber_op.stiffness.quad_form(&u[b * nfib..(b + 1) * nfib]);
    }
    Ok(acc)
}

/// Coordinates (r, θ) of base-operator node k.
pub fn base_points(grid: &BaseGrid, op: &DiscreteOperator) -> Vec<[f64; 2]> {
    op.labels.iter().map(|&i| grid.nodes[i]).collect()
}

pub fn is_polar(grid: &BaseGrid) -> bool {
    grid.kind == GridKind::PolarWedge
}
