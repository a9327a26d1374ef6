//! Sparse matrices and the linear solvers behind the implicit steps.
//!
//! Systems up to [`DIRECT_SOLVE_LIMIT`] unknowns are factorised with a banded
//! LU (partial pivoting); larger ones go through Jacobi-preconditioned
//! BiCGStab. Structured meshes order cells radially fastest, so the bandwidth
//! of every assembled operator is at most the number of radial cells.

use serde::{Deserialize, Serialize};

pub const DIRECT_SOLVE_LIMIT: usize = 2000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LinearSolveError {
    #[error("singular matrix: zero pivot in column {0}")]
    Singular(usize),
    #[error("Krylov solver stalled after {iterations} iterations (relative residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64, history: Vec<f64> },
    #[error("dimension mismatch: matrix is {rows}x{rows}, vector has {len} entries")]
    DimensionMismatch { rows: usize, len: usize },
}

/// Compressed sparse row matrix with sorted, duplicate-free columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds an `n x n` matrix from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0; n + 1];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            assert!(r < n && c < n, "triplet ({r}, {c}) outside {n}x{n}");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self { n, row_ptr, col_idx, values }
    }

    pub fn identity(n: usize) -> Self {
        let triplets: Vec<_> = (0..n).map(|i| (i, i, 1.0)).collect();
        Self::from_triplets(n, &triplets)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterates over the stored entries of row `i` as `(col, value)`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[range.clone()].iter().copied().zip(self.values[range].iter().copied())
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[range.clone()].binary_search(&j) {
            Ok(k) => self.values[range.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row(i).map(|(j, v)| v * x[j]).sum();
        }
    }

    /// `alpha * self + beta * other` for matrices of equal dimension.
    pub fn linear_combination(&self, alpha: f64, other: &CsrMatrix, beta: f64) -> CsrMatrix {
        assert_eq!(self.n, other.n);
        let triplets: Vec<_> = self
            .triplets()
            .map(|(i, j, v)| (i, j, alpha * v))
            .chain(other.triplets().map(|(i, j, v)| (i, j, beta * v)))
            .collect();
        Self::from_triplets(self.n, &triplets)
    }

    /// Adds `d[i]` to each diagonal entry.
    pub fn add_diagonal(&self, d: &[f64]) -> CsrMatrix {
        let triplets: Vec<_> = self.triplets().chain(d.iter().enumerate().map(|(i, &v)| (i, i, v))).collect();
        Self::from_triplets(self.n, &triplets)
    }

    /// Left-scales row `i` by `s[i]`.
    pub fn scale_rows(&self, s: &[f64]) -> CsrMatrix {
        let mut out = self.clone();
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                out.values[k] *= s[i];
            }
        }
        out
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.n, self.n);
        for (i, j, v) in self.triplets() {
            m[(i, j)] = v;
        }
        m
    }

    /// Largest `|i - j|` over stored entries.
    pub fn bandwidth(&self) -> usize {
        self.triplets().map(|(i, j, _)| i.abs_diff(j)).max().unwrap_or(0)
    }
}

/// Banded LU factorisation with partial pivoting, LAPACK `gbtrf` layout.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    /// Row stride `2 * kl + ku + 1`; entry `(i, j)` lives at `j * ldab + kl + ku + i - j`.
    ab: Vec<f64>,
    pivots: Vec<usize>,
}

impl BandedLu {
    pub fn factor(a: &CsrMatrix) -> Result<Self, LinearSolveError> {
        let n = a.dim();
        let bw = a.bandwidth();
        let (kl, ku) = (bw, bw);
        let ldab = 2 * kl + ku + 1;
        let mut ab = vec![0.0; ldab * n];
        let at = |i: usize, j: usize| j * ldab + kl + ku + i - j;
        for (i, j, v) in a.triplets() {
            ab[at(i, j)] = v;
        }
        let mut pivots = vec![0; n];
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = ab[at(k, k)].abs();
            for i in k + 1..=last_row {
                let v = ab[at(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            pivots[k] = p;
            if best == 0.0 {
                return Err(LinearSolveError::Singular(k));
            }
            let last_col = (k + kl + ku).min(n - 1);
            if p != k {
                for j in k..=last_col {
                    ab.swap(at(k, j), at(p, j));
                }
            }
            let pivot = ab[at(k, k)];
            for i in k + 1..=last_row {
                let l = ab[at(i, k)] / pivot;
                ab[at(i, k)] = l;
                if l != 0.0 {
                    for j in k + 1..=last_col {
                        ab[at(i, j)] -= l * ab[at(k, j)];
                    }
                }
            }
        }
        Ok(Self { n, kl, ku, ab, pivots })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        let ldab = 2 * kl + ku + 1;
        let at = |i: usize, j: usize| j * ldab + kl + ku + i - j;
        let mut x = b.to_vec();
        for k in 0..n {
            x.swap(k, self.pivots[k]);
            let xk = x[k];
            if xk != 0.0 {
                for i in k + 1..=(k + kl).min(n.saturating_sub(1)) {
                    x[i] -= self.ab[at(i, k)] * xk;
                }
            }
        }
        for k in (0..n).rev() {
            let mut s = x[k];
            for j in k + 1..=(k + kl + ku).min(n - 1) {
                s -= self.ab[at(k, j)] * x[j];
            }
            x[k] = s / self.ab[at(k, k)];
        }
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LinearSolverOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 1000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveMethod {
    BandedLu,
    BiCgStab,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveInfo {
    pub method: SolveMethod,
    pub iterations: usize,
    /// `||b - A x|| / ||b||` of the returned solution.
    pub relative_residual: f64,
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn relative_residual(a: &CsrMatrix, x: &[f64], b: &[f64]) -> f64 {
    let ax = a.mul_vec(x);
    let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, axi)| bi - axi).collect();
    let nb = norm(b);
    if nb == 0.0 {
        norm(&r)
    } else {
        norm(&r) / nb
    }
}

/// Solves `a x = b` following the direct/iterative size contract.
pub fn solve(a: &CsrMatrix, b: &[f64], opts: &LinearSolverOptions) -> Result<(Vec<f64>, SolveInfo), LinearSolveError> {
    if b.len() != a.dim() {
        return Err(LinearSolveError::DimensionMismatch { rows: a.dim(), len: b.len() });
    }
    if a.dim() <= DIRECT_SOLVE_LIMIT {
        let lu = BandedLu::factor(a)?;
        let x = lu.solve(b);
        let relative_residual = relative_residual(a, &x, b);
        Ok((x, SolveInfo { method: SolveMethod::BandedLu, iterations: 1, relative_residual }))
    } else {
        bicgstab(a, b, None, opts)
    }
}

/// A matrix prepared for repeated solves under the size contract: factorised
/// once when direct, kept for Krylov iterations otherwise.
#[derive(Debug, Clone)]
pub struct PreparedSystem {
    matrix: CsrMatrix,
    lu: Option<BandedLu>,
    opts: LinearSolverOptions,
}

impl PreparedSystem {
    pub fn new(matrix: CsrMatrix, opts: &LinearSolverOptions) -> Result<Self, LinearSolveError> {
        let lu = if matrix.dim() <= DIRECT_SOLVE_LIMIT { Some(BandedLu::factor(&matrix)?) } else { None };
        Ok(Self { matrix, lu, opts: *opts })
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    /// Solves with an optional starting guess (used by the Krylov path only).
    pub fn solve(&self, b: &[f64], x0: Option<&[f64]>) -> Result<(Vec<f64>, SolveInfo), LinearSolveError> {
        if b.len() != self.matrix.dim() {
            return Err(LinearSolveError::DimensionMismatch { rows: self.matrix.dim(), len: b.len() });
        }
        match &self.lu {
            Some(lu) => {
                let x = lu.solve(b);
                let relative_residual = relative_residual(&self.matrix, &x, b);
                Ok((x, SolveInfo { method: SolveMethod::BandedLu, iterations: 1, relative_residual }))
            }
            None => bicgstab(&self.matrix, b, x0, &self.opts),
        }
    }
}

/// Jacobi-preconditioned BiCGStab.
pub fn bicgstab(
    a: &CsrMatrix,
    b: &[f64],
    x0: Option<&[f64]>,
    opts: &LinearSolverOptions,
) -> Result<(Vec<f64>, SolveInfo), LinearSolveError> {
    let n = a.dim();
    if b.len() != n {
        return Err(LinearSolveError::DimensionMismatch { rows: n, len: b.len() });
    }
    let inv_diag: Vec<f64> = a.diagonal().iter().map(|&d| if d != 0.0 { 1.0 / d } else { 1.0 }).collect();
    let precond = |v: &[f64]| -> Vec<f64> { v.iter().zip(&inv_diag).map(|(x, d)| x * d).collect() };
    let nb = norm(b);
    if nb == 0.0 {
        return Ok((vec![0.0; n], SolveInfo { method: SolveMethod::BiCgStab, iterations: 0, relative_residual: 0.0 }));
    }
    let mut x = x0.map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; n]);
    let ax = a.mul_vec(&x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, axi)| bi - axi).collect();
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut history = Vec::new();
    let mut res = norm(&r) / nb;
    for it in 0..opts.max_iter {
        history.push(res);
        if res <= opts.tol {
            return Ok((x, SolveInfo { method: SolveMethod::BiCgStab, iterations: it, relative_residual: res }));
        }
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 {
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let p_hat = precond(&p);
        a.mul_vec_into(&p_hat, &mut v);
        let denom = dot(&r_hat, &v);
        if denom == 0.0 {
            break;
        }
        alpha = rho / denom;
        let s: Vec<f64> = r.iter().zip(&v).map(|(ri, vi)| ri - alpha * vi).collect();
        if norm(&s) / nb <= opts.tol {
            for i in 0..n {
                x[i] += alpha * p_hat[i];
            }
            let res = relative_residual(a, &x, b);
            return Ok((x, SolveInfo { method: SolveMethod::BiCgStab, iterations: it + 1, relative_residual: res }));
        }
        let s_hat = precond(&s);
        let t = a.mul_vec(&s_hat);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * p_hat[i] + omega * s_hat[i];
            r[i] = s[i] - omega * t[i];
        }
        res = norm(&r) / nb;
        if omega == 0.0 {
            break;
        }
    }
    let residual = relative_residual(a, &x, b);
    if residual <= opts.tol {
        return Ok((x, SolveInfo { method: SolveMethod::BiCgStab, iterations: opts.max_iter, relative_residual: residual }));
    }
    Err(LinearSolveError::NotConverged { iterations: history.len(), residual, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random banded, diagonally dominant, nonsymmetric matrix.
    fn banded(n: usize, bw: usize, seed: u64) -> CsrMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Vec::new();
        for i in 0..n {
            let mut off = 0.0;
            for j in i.saturating_sub(bw)..(i + bw + 1).min(n) {
                if j != i && rng.random_bool(0.7) {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    off += v.abs();
                    t.push((i, j, v));
                }
            }
            t.push((i, i, off + rng.random_range(0.1..1.0)));
        }
        CsrMatrix::from_triplets(n, &t)
    }

    #[test]
    fn triplets_are_summed() {
        let m = CsrMatrix::from_triplets(2, &[(0, 0, 1.0), (0, 0, 2.0), (1, 0, -1.0)]);
        assert_eq!(m.get(0, 0), 3.0);
        assert_eq!(m.get(1, 0), -1.0);
        assert_eq!(m.get(1, 1), 0.0);
        assert_eq!(m.nnz(), 2);
    }

    #[test]
    fn banded_lu_matches_dense_solve() {
        for (n, bw) in [(1, 0), (5, 1), (40, 3), (200, 7)] {
            let a = banded(n, bw, n as u64);
            let b: Vec<f64> = (0..n).map(|i| (i as f64).sin() + 0.5).collect();
            let x = BandedLu::factor(&a).unwrap().solve(&b);
            let dense = a.to_dense().lu().solve(&nalgebra::DVector::from_vec(b.clone())).unwrap();
            for i in 0..n {
                assert!((x[i] - dense[i]).abs() < 1e-12 * (1.0 + dense[i].abs()));
            }
        }
    }

    #[test]
    fn pivoting_handles_zero_leading_entry() {
        let a = CsrMatrix::from_triplets(2, &[(0, 1, 1.0), (1, 0, 2.0), (1, 1, 1.0)]);
        let x = BandedLu::factor(&a).unwrap().solve(&[3.0, 4.0]);
        assert!((x[0] - 0.5).abs() < 1e-15 && (x[1] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn singular_matrix_is_reported() {
        let a = CsrMatrix::from_triplets(2, &[(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0)]);
        assert!(matches!(BandedLu::factor(&a), Err(LinearSolveError::Singular(1))));
    }

    #[test]
    fn bicgstab_converges_on_dominant_systems() {
        let a = banded(3000, 5, 3);
        let b: Vec<f64> = (0..3000).map(|i| ((i * 7) % 13) as f64 - 6.0).collect();
        let (x, info) = solve(&a, &b, &LinearSolverOptions { tol: 1e-12, max_iter: 500 }).unwrap();
        assert_eq!(info.method, SolveMethod::BiCgStab);
        assert!(relative_residual(&a, &x, &b) <= 1e-12);
    }

    #[test]
    fn bicgstab_reports_non_convergence() {
        let a = banded(2500, 5, 9);
        let b = vec![1.0; 2500];
        let err = bicgstab(&a, &b, None, &LinearSolverOptions { tol: 1e-14, max_iter: 1 }).unwrap_err();
        assert!(matches!(err, LinearSolveError::NotConverged { .. }));
    }

    #[test]
    fn dimension_mismatch() {
        let a = CsrMatrix::identity(3);
        assert!(matches!(solve(&a, &[1.0], &LinearSolverOptions::default()), Err(LinearSolveError::DimensionMismatch { .. })));
    }
}
