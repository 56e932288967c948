//! Sparse symmetric storage, small dense helpers and vector utilities.

use crate::error::{invalid, Error, Result};
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};

/// Compressed sparse row matrix. Rows hold sorted, unique column indices.
#[derive(Clone, Debug)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col: Vec<usize>,
    pub val: Vec<f64>,
}

impl CsrMatrix {
    pub fn from_triplets(n: usize, trips: &[(usize, usize, f64)]) -> CsrMatrix {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(i, j, v) in trips {
            rows[i].push((j, v));
        }
        Self::from_rows(n, rows)
    }

    pub fn from_rows(n: usize, mut rows: Vec<Vec<(usize, f64)>>) -> CsrMatrix {
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col = Vec::new();
        let mut val = Vec::new();
        row_ptr.push(0);
        for r in rows.iter_mut() {
            r.sort_by_key(|e| e.0);
            let mut last: Option<usize> = None;
            for &(j, v) in r.iter() {
                if last == Some(j) {
                    *val.last_mut().unwrap() += v;
                } else {
                    col.push(j);
                    val.push(v);
                    last = Some(j);
                }
            }
            row_ptr.push(col.len());
        }
        CsrMatrix { n, row_ptr, col, val }
    }

    pub fn identity(n: usize) -> CsrMatrix {
        CsrMatrix {
            n,
            row_ptr: (0..=n).collect(),
            col: (0..n).collect(),
            val: vec![1.0; n],
        }
    }

    pub fn nnz(&self) -> usize {
        self.col.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.col[a..b].iter().copied().zip(self.val[a..b].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        match self.col[a..b].binary_search(&j) {
            Ok(k) => self.val[a + k],
            Err(_) => 0.0,
        }
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.val[k] * x[self.col[k]];
            }
            y[i] = acc;
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n {
            let mut r = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                r += self.val[k] * x[self.col[k]];
            }
            acc += x[i] * r;
        }
        acc
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.val.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// ‖A − Aᵀ‖_F.
    pub fn symmetry_defect(&self) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                if j > i {
                    let d = v - self.get(j, i);
                    acc += 2.0 * d * d;
                } else if j < i && self.get(j, i) == 0.0 && v != 0.0 {
                    acc += v * v;
                }
            }
        }
        acc.sqrt()
    }

    /// Principal submatrix on `keep` (sorted), renumbered 0..keep.len().
    pub fn restrict(&self, keep: &[usize]) -> CsrMatrix {
        let mut map = vec![usize::MAX; self.n];
        for (k, &i) in keep.iter().enumerate() {
            map[i] = k;
        }
        let rows = keep
            .iter()
            .map(|&i| {
                self.row(i)
                    .filter(|(j, _)| map[*j] != usize::MAX)
                    .map(|(j, v)| (map[j], v))
                    .collect()
            })
            .collect();
        CsrMatrix::from_rows(keep.len(), rows)
    }

    pub fn to_dense(&self) -> Mat<f64> {
        let mut m = Mat::<f64>::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                m[(i, j)] += v;
            }
        }
        m
    }

    /// Lower triangle of `diag(d) + c·self` in faer column storage.
    pub fn to_faer_lower_shifted(&self, d: &[f64], c: f64) -> Result<SparseColMat<usize, f64>> {
        let mut trips = Vec::with_capacity(self.nnz() / 2 + self.n);
        for i in 0..self.n {
            trips.push(Triplet::new(i, i, d[i]));
            for (j, v) in self.row(i) {
                if j <= i {
                    trips.push(Triplet::new(i, j, c * v));
                }
            }
        }
        SparseColMat::try_new_from_triplets(self.n, self.n, &trips)
            .map_err(|e| Error::Linalg(format!("sparse build: {e:?}")))
    }

    /// Sum of two matrices with the same dimension.
    pub fn add(&self, other: &CsrMatrix, a: f64, b: f64) -> CsrMatrix {
        let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let mut r: Vec<(usize, f64)> = self.row(i).map(|(j, v)| (j, a * v)).collect();
            r.extend(other.row(i).map(|(j, v)| (j, b * v)));
            rows.push(r);
        }
        CsrMatrix::from_rows(self.n, rows)
    }

    /// Kronecker product A ⊗ B with row index i*nb + k.
    pub fn kron(a: &CsrMatrix, b: &CsrMatrix) -> CsrMatrix {
        let n = a.n * b.n;
        let mut rows = Vec::with_capacity(n);
        for i in 0..a.n {
            for k in 0..b.n {
                let mut r = Vec::new();
                for (j, va) in a.row(i) {
                    for (l, vb) in b.row(k) {
                        r.push((j * b.n + l, va * vb));
                    }
                }
                rows.push(r);
            }
        }
        CsrMatrix::from_rows(n, rows)
    }

    pub fn diag(d: &[f64]) -> CsrMatrix {
        CsrMatrix {
            n: d.len(),
            row_ptr: (0..=d.len()).collect(),
            col: (0..d.len()).collect(),
            val: d.to_vec(),
        }
    }

    /// max_ij |A_ij − B_ij| over the union of patterns.
    pub fn max_abs_diff(&self, other: &CsrMatrix) -> f64 {
        let mut m = 0.0_f64;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                m = m.max((v - other.get(i, j)).abs());
            }
            for (j, v) in other.row(i) {
                m = m.max((v - self.get(i, j)).abs());
            }
        }
        m
    }

    pub fn max_abs(&self) -> f64 {
        self.val.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// ⟨a, b⟩ weighted by the diagonal mass `w`.
pub fn wdot(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    w.iter().zip(a).zip(b).map(|((w, x), y)| w * x * y).sum()
}

pub fn wnorm(w: &[f64], a: &[f64]) -> f64 {
    wdot(w, a, a).max(0.0).sqrt()
}

pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scale(a: f64, x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| a * v).collect()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Eigen-decomposition of a dense symmetric matrix, eigenvalues ascending.
pub fn sym_eigen(a: &Mat<f64>) -> Result<(Vec<f64>, Mat<f64>)> {
    let e = a
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Linalg(format!("eigensolver: {e:?}")))?;
    let s = e.S();
    let vals: Vec<f64> = (0..a.nrows()).map(|i| s[i]).collect();
    Ok((vals, e.U().to_owned()))
}

/// Determinant and inverse of a small dense matrix by Gauss–Jordan with partial pivoting.
pub fn small_inverse<const N: usize>(a: &[[f64; N]; N]) -> Result<(f64, [[f64; N]; N])> {
    let mut m = *a;
    let mut inv = [[0.0; N]; N];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let mut det = 1.0;
    for c in 0..N {
        let mut p = c;
        for r in c + 1..N {
            if m[r][c].abs() > m[p][c].abs() {
                p = r;
            }
        }
        if m[p][c] == 0.0 {
            return Err(invalid("singular matrix"));
        }
        if p != c {
            m.swap(p, c);
            inv.swap(p, c);
            det = -det;
        }
        let piv = m[c][c];
        det *= piv;
        for k in 0..N {
            m[c][k] /= piv;
            inv[c][k] /= piv;
        }
        for r in 0..N {
            if r != c {
                let f = m[r][c];
                if f != 0.0 {
                    for k in 0..N {
                        m[r][k] -= f * m[c][k];
                        inv[r][k] -= f * inv[c][k];
                    }
                }
            }
        }
    }
    Ok((det, inv))
}

/// Eigenvalues of a small symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn small_sym_eigenvalues<const N: usize>(a: &[[f64; N]; N]) -> [f64; N] {
    let mut m = *a;
    for _sweep in 0..60 {
        let mut off = 0.0;
        for (i, row) in m.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if i != j {
                    off += v * v;
                }
            }
        }
        if off < 1e-30 {
            break;
        }
        for p in 0..N {
            for q in p + 1..N {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..N {
                    let mkp = m[k][p];
                    let mkq = m[k][q];
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..N {
                    let mpk = m[p][k];
                    let mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev = [0.0; N];
    for i in 0..N {
        ev[i] = m[i][i];
    }
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ev
}

/// Operator (spectral) norm of a small symmetric matrix.
pub fn small_sym_opnorm<const N: usize>(a: &[[f64; N]; N]) -> f64 {
    let ev = small_sym_eigenvalues(a);
    ev[0].abs().max(ev[N - 1].abs())
}
