//! Dense linear-algebra kernels.
//!
//! Everything here works on row-major `f64` matrices. Large products,
//! Cholesky factorizations and large symmetric eigendecompositions are
//! delegated to `faer`; small eigenproblems use cyclic Jacobi rotations.

use std::ops::{Index, IndexMut};

use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::{Accum, MatMut, MatRef, Par, Side};
use thiserror::Error;

/// Plain dense vector.
pub type Vector = Vec<f64>;

/// Largest dimension handled by the Jacobi eigensolver. Bigger problems go
/// through a tridiagonal solver.
pub const JACOBI_MAX_DIM: usize = 96;

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_REL_TOL: f64 = 1e-12;
const SYMMETRY_REL_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op} requires a square matrix, got {rows}x{cols}")]
    NotSquare { op: &'static str, rows: usize, cols: usize },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("matrix is not positive definite (nonpositive pivot at {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("eigensolver did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
    #[error("cannot raise eigenvalue {eigenvalue:e} to power {power}")]
    SingularPower { eigenvalue: f64, power: f64 },
    #[error("triangular matrix has zero diagonal entry at {index}")]
    SingularTriangular { index: usize },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data.
    ///
    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length does not match {rows}x{cols}"
        );
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
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

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Column vector (n×1).
    pub fn column(v: &[f64]) -> Self {
        Self::from_vec(v.len(), 1, v.to_vec())
    }

    /// Outer product `u vᵀ`.
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        Self::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vector {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_col(&mut self, j: usize, v: &[f64]) {
        for (i, &x) in v.iter().enumerate() {
            self[(i, j)] = x;
        }
    }

    pub fn diag(&self) -> Vector {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| alpha * x).collect(),
        }
    }

    pub fn scale_mut(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn add(&self, other: &Matrix) -> Self {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn sub(&self, other: &Matrix) -> Self {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    /// `self + tau·I`.
    pub fn add_identity(&self, tau: f64) -> Self {
        let mut out = self.clone();
        for i in 0..self.rows.min(self.cols) {
            out[(i, i)] += tau;
        }
        out
    }

    /// `(self + selfᵀ) / 2`.
    pub fn symmetrize(&self) -> Self {
        assert!(self.is_square(), "symmetrize needs a square matrix");
        Self::from_fn(self.rows, self.cols, |i, j| 0.5 * (self[(i, j)] + self[(j, i)]))
    }

    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in i + 1..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// Upper-triangular part (diagonal included).
    pub fn triu(&self) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| if j >= i { self[(i, j)] } else { 0.0 })
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Self {
        assert_eq!(
            self.cols,
            other.rows,
            "matmul shape mismatch: {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(&mut out, self.view(), other.view());
        out
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Matrix) -> Self {
        assert_eq!(self.rows, other.rows, "matmul_tn shape mismatch");
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(&mut out, self.view().transpose(), other.view());
        out
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Matrix) -> Self {
        assert_eq!(self.cols, other.cols, "matmul_nt shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(&mut out, self.view(), other.view().transpose());
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vector {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ v`.
    pub fn matvec_t(&self, v: &[f64]) -> Vector {
        assert_eq!(self.rows, v.len(), "matvec_t shape mismatch");
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            if vi != 0.0 {
                for (o, a) in out.iter_mut().zip(self.row(i)) {
                    *o += vi * a;
                }
            }
        }
        out
    }

    pub(crate) fn view(&self) -> MatRef<'_, f64> {
        MatRef::from_row_major_slice(&self.data, self.rows, self.cols)
    }

    fn view_mut(&mut self) -> MatMut<'_, f64> {
        MatMut::from_row_major_slice_mut(&mut self.data, self.rows, self.cols)
    }

    fn from_faer(m: MatRef<'_, f64>) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

fn gemm(out: &mut Matrix, lhs: MatRef<'_, f64>, rhs: MatRef<'_, f64>) {
    faer::linalg::matmul::matmul(out.view_mut(), Accum::Replace, lhs, rhs, 1.0, Par::Seq);
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let (ra, ca) = a.shape();
    let (rb, cb) = b.shape();
    let mut out = Matrix::zeros(ra * rb, ca * cb);
    for i in 0..ra {
        for j in 0..ca {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            for k in 0..rb {
                let row = i * rb + k;
                let dst = &mut out.row_mut(row)[j * cb..(j + 1) * cb];
                for (d, &bkl) in dst.iter_mut().zip(b.row(k)) {
                    *d = aij * bkl;
                }
            }
        }
    }
    out
}

fn require_square(op: &'static str, a: &Matrix) -> Result<()> {
    if a.is_square() {
        Ok(())
    } else {
        Err(LinalgError::NotSquare {
            op,
            rows: a.rows,
            cols: a.cols,
        })
    }
}

/// Lower Cholesky factor of the symmetrized `a + tau·I`.
pub fn cholesky(a: &Matrix, tau: f64) -> Result<Matrix> {
    let llt = damped_llt(a, tau)?;
    Ok(Matrix::from_faer(llt.L()))
}

fn damped_llt(a: &Matrix, tau: f64) -> Result<faer::linalg::solvers::Llt<f64>> {
    require_square("cholesky", a)?;
    let damped = a.symmetrize().add_identity(tau);
    damped.view().llt(Side::Lower).map_err(|e| match e {
        faer::linalg::cholesky::llt::factor::LltError::NonPositivePivot { index } => {
            LinalgError::NotPositiveDefinite { pivot: index }
        }
    })
}

/// Solves `(a + tau·I) x = b` through a Cholesky factorization.
pub fn solve_spd(a: &Matrix, tau: f64, b: &Matrix) -> Result<Matrix> {
    if b.rows != a.rows {
        return Err(LinalgError::ShapeMismatch {
            op: "solve_spd",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let llt = damped_llt(a, tau)?;
    let x = llt.solve(b.view());
    Ok(Matrix::from_faer(x.as_ref()))
}

/// Explicit `(a + tau·I)⁻¹`, symmetrized.
pub fn inverse_spd_damped(a: &Matrix, tau: f64) -> Result<Matrix> {
    let llt = damped_llt(a, tau)?;
    let inv = llt.inverse();
    Ok(Matrix::from_faer(inv.as_ref()).symmetrize())
}

/// Symmetric eigendecomposition `a = V diag(λ) Vᵀ`, eigenvalues ascending.
#[derive(Clone, Debug)]
pub struct SymEig {
    pub eigenvalues: Vector,
    /// Eigenvectors stored as columns.
    pub eigenvectors: Matrix,
}

impl SymEig {
    /// `V diag(f(λ)) Vᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let v = &self.eigenvectors;
        let scaled = Matrix::from_fn(v.rows(), v.cols(), |i, j| v[(i, j)] * f(self.eigenvalues[j]));
        scaled.matmul_nt(v).symmetrize()
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_with(|l| l)
    }
}

pub fn sym_eig(a: &Matrix) -> Result<SymEig> {
    require_square("sym_eig", a)?;
    let scale = a.max_abs().max(1.0);
    let asym = a.asymmetry();
    if asym > SYMMETRY_REL_TOL * scale {
        return Err(LinalgError::NotSymmetric { asymmetry: asym });
    }
    let a = a.symmetrize();
    if a.rows <= JACOBI_MAX_DIM {
        jacobi_eig(&a)
    } else {
        tridiagonal_eig(&a)
    }
}

/// Cyclic Jacobi eigenvalue iteration.
pub fn jacobi_eig(a: &Matrix) -> Result<SymEig> {
    let n = a.rows;
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let threshold = JACOBI_REL_TOL * a.frobenius_norm();

    let off_norm = |m: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[(i, j)] * m[(i, j)];
                }
            }
        }
        s.sqrt()
    };

    let mut converged = off_norm(&m) <= threshold;
    let mut sweeps = 0;
    while !converged && sweeps < JACOBI_MAX_SWEEPS {
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // columns p, q
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                // rows p, q
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        sweeps += 1;
        converged = off_norm(&m) <= threshold;
    }
    if !converged {
        return Err(LinalgError::NoConvergence { sweeps });
    }
    Ok(sorted_eig(m.diag(), &v))
}

fn tridiagonal_eig(a: &Matrix) -> Result<SymEig> {
    let eig = a
        .view()
        .self_adjoint_eigen(Side::Lower)
        .map_err(|_| LinalgError::NoConvergence { sweeps: 0 })?;
    let values: Vector = eig.S().column_vector().iter().copied().collect();
    let vectors = Matrix::from_faer(eig.U());
    Ok(sorted_eig(values, &vectors))
}

fn sorted_eig(values: Vector, vectors: &Matrix) -> SymEig {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let eigenvalues = order.iter().map(|&i| values[i]).collect();
    let eigenvectors = Matrix::from_fn(n, n, |r, c| vectors[(r, order[c])]);
    SymEig {
        eigenvalues,
        eigenvectors,
    }
}

/// How eigenvalues are treated before the damping shift in [`sym_power`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EigenvalueMode {
    #[default]
    Signed,
    /// Replace each eigenvalue by its absolute value first.
    Absolute,
}

/// `V diag((λᵢ + τ)^p) Vᵀ`.
pub fn sym_power(a: &Matrix, p: f64, tau: f64, mode: EigenvalueMode) -> Result<Matrix> {
    let eig = sym_eig(a)?;
    let integral = p.fract() == 0.0;
    let mut shifted = Vec::with_capacity(eig.eigenvalues.len());
    for &lambda in &eig.eigenvalues {
        let base = match mode {
            EigenvalueMode::Signed => lambda,
            EigenvalueMode::Absolute => lambda.abs(),
        } + tau;
        if (p < 0.0 && base <= 0.0) || (!integral && base < 0.0) {
            return Err(LinalgError::SingularPower {
                eigenvalue: base,
                power: p,
            });
        }
        shifted.push(base);
    }
    let powered: Vector = shifted
        .iter()
        .map(|&b| if integral { b.powi(p as i32) } else { b.powf(p) })
        .collect();
    let with_values = SymEig {
        eigenvalues: powered,
        eigenvectors: eig.eigenvectors,
    };
    Ok(with_values.reconstruct())
}

/// Solves `q x = b` (or `qᵀ x = b`) for upper-triangular `q`.
pub fn triangular_solve(q: &Matrix, b: &Matrix, transpose: bool) -> Result<Matrix> {
    require_square("triangular_solve", q)?;
    if b.rows != q.rows {
        return Err(LinalgError::ShapeMismatch {
            op: "triangular_solve",
            left: q.shape(),
            right: b.shape(),
        });
    }
    let n = q.rows;
    if let Some(index) = (0..n).find(|&i| q[(i, i)] == 0.0) {
        return Err(LinalgError::SingularTriangular { index });
    }
    let m = b.cols;
    let mut x = b.clone();
    if transpose {
        // qᵀ is lower triangular: forward substitution.
        for i in 0..n {
            let (done, rest) = x.data.split_at_mut(i * m);
            let xi = &mut rest[..m];
            for j in 0..i {
                let qji = q[(j, i)];
                if qji != 0.0 {
                    axpy(-qji, &done[j * m..(j + 1) * m], xi);
                }
            }
            let d = 1.0 / q[(i, i)];
            xi.iter_mut().for_each(|v| *v *= d);
        }
    } else {
        for i in (0..n).rev() {
            let (head, solved) = x.data.split_at_mut((i + 1) * m);
            let xi = &mut head[i * m..];
            for j in i + 1..n {
                let qij = q[(i, j)];
                if qij != 0.0 {
                    let off = (j - i - 1) * m;
                    axpy(-qij, &solved[off..off + m], xi);
                }
            }
            let d = 1.0 / q[(i, i)];
            xi.iter_mut().for_each(|v| *v *= d);
        }
    }
    Ok(x)
}
