//! Dense real matrix and vector kernels.
//!
//! Everything here works on small dense problems (p up to a few hundred).
//! Vectors are plain `[f64]` slices; [`Matrix`] is row-major and
//! [`SymMatrix`] stores the lower triangle once, so symmetry is exact by
//! construction.

use crate::error::{Error, Result};

/// Dense row-major matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major entries, rejecting wrong lengths and non-finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data has {} entries, expected {}x{}={}",
                data.len(),
                rows,
                cols,
                rows * cols
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite matrix entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_fn(dim, dim, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns(rows: usize, columns: &[Vec<f64>]) -> Self {
        debug_assert!(columns.iter().all(|c| c.len() == rows));
        Self::from_fn(rows, columns.len(), |i, j| columns[j][i])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.cols).map(|j| self.column(j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// `self · v`.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::invalid(format!(
                "cannot multiply {}x{} matrix by vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `selfᵀ · v`.
    pub fn tr_mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::invalid(format!(
                "cannot multiply transpose of {}x{} matrix by vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            if vi != 0.0 {
                axpy(vi, self.row(i), &mut out);
            }
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::invalid(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a != 0.0 {
                    axpy(a, other.row(k), out_row);
                }
            }
        }
        Ok(out)
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Symmetric matrix storing its lower triangle once.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    lower: Vec<f64>,
}

#[inline]
fn packed_index(i: usize, j: usize) -> usize {
    let (r, c) = if i >= j { (i, j) } else { (j, i) };
    r * (r + 1) / 2 + c
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            lower: vec![0.0; dim * (dim + 1) / 2],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::diagonal(&vec![1.0; dim])
    }

    pub fn diagonal(values: &[f64]) -> Self {
        Self::from_fn(values.len(), |i, j| if i == j { values[i] } else { 0.0 })
    }

    /// Builds from a function evaluated only on `i >= j`.
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut lower = Vec::with_capacity(dim * (dim + 1) / 2);
        for i in 0..dim {
            for j in 0..=i {
                lower.push(f(i, j));
            }
        }
        Self { dim, lower }
    }

    /// Builds from a full square matrix, requiring exact symmetry and finite entries.
    pub fn from_dense(m: &Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::invalid(format!(
                "symmetric matrix must be square, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        for i in 0..m.rows() {
            for j in 0..i {
                if m.get(i, j) != m.get(j, i) {
                    return Err(Error::invalid(format!(
                        "matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self::from_fn(m.rows(), |i, j| m.get(i, j)))
    }

    /// Builds from row-major full entries (both triangles must agree).
    pub fn from_row_major(dim: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_dense(&Matrix::new(dim, dim, data)?)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.lower[packed_index(i, j)]
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    pub fn to_dense(&self) -> Matrix {
        Matrix::from_fn(self.dim, self.dim, |i, j| self.get(i, j))
    }

    pub fn is_finite(&self) -> bool {
        self.lower.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, factor: f64) -> SymMatrix {
        SymMatrix {
            dim: self.dim,
            lower: self.lower.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.dim, "dimension mismatch in SymMatrix::mul_vec");
        let mut out = vec![0.0; self.dim];
        for i in 0..self.dim {
            let base = i * (i + 1) / 2;
            for j in 0..i {
                let a = self.lower[base + j];
                out[i] += a * v[j];
                out[j] += a * v[i];
            }
            out[i] += self.lower[base + i] * v[i];
        }
        out
    }

    /// `uᵀ A v`.
    pub fn bilinear(&self, u: &[f64], v: &[f64]) -> f64 {
        dot(u, &self.mul_vec(v))
    }

    /// `vᵀ A v`.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        self.bilinear(v, v)
    }

    /// `A²`, exactly symmetric.
    pub fn square(&self) -> SymMatrix {
        let d = self.dim;
        SymMatrix::from_fn(d, |i, j| (0..d).map(|k| self.get(i, k) * self.get(k, j)).sum())
    }

    /// Principal submatrix `A[J, J]` in the order given by `idx`.
    pub fn principal_submatrix(&self, idx: &[usize]) -> SymMatrix {
        SymMatrix::from_fn(idx.len(), |a, b| self.get(idx[a], idx[b]))
    }

    /// Same dimension as `self`, with rows and columns outside `idx` zeroed.
    pub fn restricted(&self, idx: &[usize]) -> SymMatrix {
        let mut keep = vec![false; self.dim];
        idx.iter().for_each(|&j| keep[j] = true);
        SymMatrix::from_fn(self.dim, |i, j| {
            if keep[i] && keep[j] {
                self.get(i, j)
            } else {
                0.0
            }
        })
    }

    /// Frobenius norm counting both triangles.
    pub fn frobenius_norm(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.dim {
            for j in 0..=i {
                let v = self.get(i, j);
                s += if i == j { v * v } else { 2.0 * v * v };
            }
        }
        s.sqrt()
    }

    pub fn max_abs_diff(&self, other: &SymMatrix) -> f64 {
        assert_eq!(self.dim, other.dim);
        self.lower
            .iter()
            .zip(&other.lower)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha · x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

pub fn scaled(alpha: f64, x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| alpha * v).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn is_finite_vec(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Gram matrix `XᵀX / n`.
pub fn gram(x: &Matrix, n: usize) -> Result<SymMatrix> {
    if n == 0 {
        return Err(Error::invalid("gram requires n >= 1"));
    }
    if x.rows() != n {
        return Err(Error::invalid(format!(
            "gram: design has {} rows but n = {}",
            x.rows(),
            n
        )));
    }
    let p = x.cols();
    let mut acc = SymMatrix::zeros(p);
    for i in 0..n {
        let row = x.row(i);
        for a in 0..p {
            let ra = row[a];
            if ra == 0.0 {
                continue;
            }
            let base = a * (a + 1) / 2;
            for b in 0..=a {
                acc.lower[base + b] += ra * row[b];
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    acc.lower.iter_mut().for_each(|v| *v *= inv_n);
    Ok(acc)
}

pub fn trace(a: &SymMatrix) -> f64 {
    (0..a.dim()).map(|i| a.get(i, i)).sum()
}

/// PSD tolerance used throughout: `1e-10 · Tr(A)`.
pub fn psd_tolerance(a: &SymMatrix) -> f64 {
    1e-10 * trace(a).abs()
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEigen {
    /// Eigenvalues in ascending order.
    pub values: Vec<f64>,
    /// Eigenvectors stored as columns, matching `values`.
    pub vectors: Matrix,
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigensolver. Stops once the off-diagonal Frobenius norm is
/// below `1e-12 · ‖A‖_F`.
pub fn sym_eigen(a: &SymMatrix) -> SymEigen {
    let n = a.dim();
    let mut m = a.to_dense();
    let mut v = Matrix::identity(n);
    let threshold = 1e-12 * a.frobenius_norm();

    let off_norm = |m: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..i {
                s += 2.0 * m.get(i, j) * m.get(i, j);
            }
        }
        s.sqrt()
    };

    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_norm(&m) <= threshold {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                m.set(p, q, 0.0);
                m.set(q, p, 0.0);

                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(i, i).total_cmp(&m.get(j, j)));
    let values = order.iter().map(|&i| m.get(i, i)).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v.get(r, order[c]));
    SymEigen { values, vectors }
}

pub const SPECTRAL_TOL: f64 = 1e-10;
pub const SPECTRAL_MAX_ITER: usize = 10_000;
const DIRECT_EIGEN_MAX_DIM: usize = 64;

/// Largest eigenvalue of a PSD matrix.
///
/// Small matrices (dim <= 64) go straight to the Jacobi solver. Larger ones
/// use power iteration from the normalized all-ones vector, stopping when the
/// eigen-residual drops below `tol · λ`.
pub fn spectral_radius(a: &SymMatrix, tol: f64, max_iter: usize) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(Error::invalid("spectral_radius requires tol > 0"));
    }
    let n = a.dim();
    if n == 0 {
        return Ok(0.0);
    }
    if n <= DIRECT_EIGEN_MAX_DIM {
        let eig = sym_eigen(a);
        return Ok(eig.values.iter().fold(0.0_f64, |m, v| m.max(v.abs())));
    }

    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        let av = a.mul_vec(&v);
        let norm = norm2(&av);
        if norm == 0.0 {
            return Ok(0.0);
        }
        lambda = dot(&v, &av);
        let residual: f64 = av
            .iter()
            .zip(&v)
            .map(|(x, y)| (x - lambda * y).powi(2))
            .sum::<f64>()
            .sqrt();
        if residual <= tol * lambda.abs() {
            return Ok(lambda);
        }
        v = scaled(1.0 / norm, &av);
    }
    Err(Error::NonConvergence {
        message: format!("power iteration did not converge in {max_iter} iterations"),
        last_iterate: lambda,
    })
}

/// `ρ(A)` with the crate-wide default tolerance.
pub fn rho(a: &SymMatrix) -> Result<f64> {
    spectral_radius(a, SPECTRAL_TOL, SPECTRAL_MAX_ITER)
}

/// Symmetric PSD square root. Eigenvalues in `[-tol_eig, 0)` are clamped to
/// zero; anything below `-tol_eig` is rejected.
pub fn sym_sqrt(a: &SymMatrix) -> Result<SymMatrix> {
    let tol = psd_tolerance(a);
    let eig = sym_eigen(a);
    let mut roots = Vec::with_capacity(a.dim());
    for &lambda in &eig.values {
        if lambda < -tol {
            return Err(Error::invalid(format!(
                "matrix is not PSD: eigenvalue {lambda:e} below -{tol:e}"
            )));
        }
        roots.push(lambda.max(0.0).sqrt());
    }
    let v = &eig.vectors;
    let n = a.dim();
    Ok(SymMatrix::from_fn(n, |i, j| {
        (0..n).map(|k| v.get(i, k) * roots[k] * v.get(j, k)).sum()
    }))
}

/// Smallest eigenvalue of the principal submatrix `Σ[J, J]`.
///
/// This is the full-rank surrogate for the cone-restricted eigenvalue; the
/// cone-constrained minimum itself is not computed.
pub fn min_eig_on_support(sigma: &SymMatrix, support: &[usize]) -> Result<f64> {
    if support.is_empty() {
        return Err(Error::invalid("min_eig_on_support requires a nonempty support"));
    }
    if let Some(&bad) = support.iter().find(|&&j| j >= sigma.dim()) {
        return Err(Error::invalid(format!(
            "support index {bad} out of range for dimension {}",
            sigma.dim()
        )));
    }
    let sub = sigma.principal_submatrix(support);
    Ok(sym_eigen(&sub).values[0])
}

/// Residual of `target` after orthogonal projection onto `direction`.
/// A zero direction leaves `target` unchanged.
pub fn project_residual(target: &[f64], direction: &[f64]) -> Result<Vec<f64>> {
    if target.len() != direction.len() {
        return Err(Error::invalid(format!(
            "project_residual: lengths {} and {} differ",
            target.len(),
            direction.len()
        )));
    }
    let dd = dot(direction, direction);
    if dd == 0.0 {
        return Ok(target.to_vec());
    }
    let coef = dot(target, direction) / dd;
    let mut out = target.to_vec();
    axpy(-coef, direction, &mut out);
    Ok(out)
}

/// Orthonormalizes columns by modified Gram-Schmidt with one re-orthogonalization
/// pass. Columns whose residual norm falls below `rank_tol` are dropped.
pub fn orthonormalize(columns: &[Vec<f64>], rank_tol: f64) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for col in columns {
        let mut v = col.clone();
        for _ in 0..2 {
            for q in &basis {
                let c = dot(q, &v);
                axpy(-c, q, &mut v);
            }
        }
        let norm = norm2(&v);
        if norm > rank_tol {
            basis.push(scaled(1.0 / norm, &v));
        }
    }
    basis
}

/// Sine of the largest principal angle between two subspaces given by
/// orthonormal column sets. Returns 1 when the dimensions differ.
pub fn max_principal_angle_sine(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    if a.len() != b.len() {
        return 1.0;
    }
    if a.is_empty() {
        return 0.0;
    }
    // residual of b after projection on span(a); its largest singular value is sin θ_max
    let residuals: Vec<Vec<f64>> = b
        .iter()
        .map(|bj| {
            let mut r = bj.clone();
            for _ in 0..2 {
                for ai in a {
                    let c = dot(ai, &r);
                    axpy(-c, ai, &mut r);
                }
            }
            r
        })
        .collect();
    let k = residuals.len();
    let rtr = SymMatrix::from_fn(k, |i, j| dot(&residuals[i], &residuals[j]));
    let top = sym_eigen(&rtr).values[k - 1].max(0.0);
    top.sqrt().min(1.0)
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
pub fn solve(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return Err(Error::invalid("solve requires a square system"));
    }
    let mut m = a.clone();
    let mut rhs = b.to_vec();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m.get(i, col).abs().total_cmp(&m.get(j, col).abs()))
            .unwrap_or(col);
        if m.get(pivot, col) == 0.0 {
            return Err(Error::invalid("singular system"));
        }
        if pivot != col {
            for k in 0..n {
                let tmp = m.get(col, k);
                m.set(col, k, m.get(pivot, k));
                m.set(pivot, k, tmp);
            }
            rhs.swap(col, pivot);
        }
        let diag = m.get(col, col);
        for r in (col + 1)..n {
            let f = m.get(r, col) / diag;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                m.set(r, k, m.get(r, k) - f * m.get(col, k));
            }
            rhs[r] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = ((r + 1)..n).map(|k| m.get(r, k) * x[k]).sum();
        x[r] = (rhs[r] - s) / m.get(r, r);
    }
    Ok(x)
}
