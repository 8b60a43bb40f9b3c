//! Dense linear algebra used throughout the crate.
//!
//! [`DenseMatrix`] is a plain row-major matrix of finite `f64` values. The
//! factorizations behind [`sym_eig`], [`solve`] and [`inverse`] are delegated
//! to `nalgebra`; this module owns the contracts (symmetry checks, PSD
//! clamping, tolerance reporting) that the rest of the crate relies on.

use std::fmt;
use std::ops::{Index, IndexMut};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative symmetry tolerance: `|A_ij - A_ji| <= SYMMETRY_TOL * max(1, |A|_max)`.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Eigenvalues above `-PSD_CLAMP` are treated as round-off and clamped to zero.
pub const PSD_CLAMP: f64 = 1e-10;

/// Condition estimate beyond which a system is reported as near-singular.
pub const NEAR_SINGULAR_CONDITION: f64 = 1e12;

const EIG_MAX_ITER: usize = 10_000;

#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            let row: Vec<String> = self
                .row(r)
                .iter()
                .take(8)
                .map(|x| format!("{x:>10.4e}"))
                .collect();
            writeln!(f, "  {}", row.join(" "))?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
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

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from row-major entries, rejecting NaN/Inf.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims("DenseMatrix entries", rows * cols, data.len()));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: "DenseMatrix construction".into(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from a slice of equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::dims("DenseMatrix row length", c, row.len()));
            }
            data.extend_from_slice(row);
        }
        Self::from_row_major(r, c, data)
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

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Row-major entries.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols))
            .map(|i| self[(i, i)])
            .collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Largest absolute entry (0 for an empty matrix).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (acc, x) in s.iter_mut().zip(self.row(i)) {
                *acc += x;
            }
        }
        s
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `max |A_ij - A_ji|` (requires a square matrix).
    pub fn symmetry_defect(&self) -> f64 {
        let mut d = 0.0_f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                d = d.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        d
    }

    pub fn is_symmetric(&self) -> bool {
        self.is_square() && self.symmetry_defect() <= SYMMETRY_TOL * self.max_abs().max(1.0)
    }

    pub fn matmul(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::dims("matmul inner dimension", self.cols, rhs.rows));
        }
        let mut out = DenseMatrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `A x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::dims("matvec operand", self.cols, x.len()));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// `Aᵀ x`.
    pub fn transpose_matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::dims("transpose matvec operand", self.rows, x.len()));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * xi;
            }
        }
        Ok(out)
    }

    pub fn add(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with(rhs, "matrix add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with(rhs, "matrix sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    /// Adds `s` to every diagonal entry.
    pub fn add_diagonal(&mut self, s: f64) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += s;
        }
    }

    fn zip_with(
        &self,
        rhs: &DenseMatrix,
        ctx: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<DenseMatrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::dims(ctx, self.rows * self.cols, rhs.rows * rhs.cols));
        }
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        })
    }

    /// Copy with row and column `k` removed.
    pub fn without_row_col(&self, k: usize) -> DenseMatrix {
        let n = self.rows;
        let keep: Vec<usize> = (0..n).filter(|&i| i != k).collect();
        let m = self.cols;
        let keep_c: Vec<usize> = (0..m).filter(|&j| j != k).collect();
        DenseMatrix::from_fn(keep.len(), keep_c.len(), |i, j| self[(keep[i], keep_c[j])])
    }

    fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    fn from_nalgebra(m: &DMatrix<f64>) -> DenseMatrix {
        DenseMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }

    fn check_symmetric(&self) -> Result<()> {
        if !self.is_square() {
            return Err(Error::dims(
                "symmetric matrix (square)",
                self.rows,
                self.cols,
            ));
        }
        if !self.all_finite() {
            return Err(Error::NonFinite {
                context: "symmetric matrix input".into(),
            });
        }
        if !self.is_symmetric() {
            return Err(Error::NotSymmetric {
                defect: self.symmetry_defect(),
            });
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Eigen-decomposition `A = V diag(values) Vᵀ` with ascending eigenvalues.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns.
    pub vectors: DenseMatrix,
}

impl SymEigen {
    /// `V f(diag(λ)) Vᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        let n = self.values.len();
        let fl: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        let v = &self.vectors;
        DenseMatrix::from_fn(n, n, |i, j| {
            (0..n).map(|k| v[(i, k)] * fl[k] * v[(j, k)]).sum()
        })
    }
}

/// Symmetric eigen-decomposition.
pub fn sym_eig(a: &DenseMatrix) -> Result<SymEigen> {
    a.check_symmetric()?;
    let n = a.rows();
    if n == 0 {
        return Ok(SymEigen {
            values: Vec::new(),
            vectors: DenseMatrix::zeros(0, 0),
        });
    }
    let eig = nalgebra::SymmetricEigen::try_new(a.to_nalgebra(), f64::EPSILON, EIG_MAX_ITER)
        .ok_or(Error::NoConvergence {
            iterations: EIG_MAX_ITER,
        })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = DenseMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    Ok(SymEigen { values, vectors })
}

/// Principal square root of a symmetric positive semidefinite matrix.
///
/// Eigenvalues in `[-1e-10, 0)` are clamped to zero; anything more negative
/// is rejected.
pub fn sqrt_psd(a: &DenseMatrix) -> Result<DenseMatrix> {
    let eig = sym_eig(a)?;
    if let Some(&lowest) = eig.values.first() {
        if lowest < -PSD_CLAMP {
            return Err(Error::NotPsd { eigenvalue: lowest });
        }
    }
    let s = eig.reconstruct_with(|l| l.max(0.0).sqrt());
    // symmetrize the round-off of the V diag Vᵀ product
    Ok(DenseMatrix::from_fn(s.rows(), s.cols(), |i, j| {
        0.5 * (s[(i, j)] + s[(j, i)])
    }))
}

fn lu_of(a: &DenseMatrix, ctx: &str) -> Result<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    if !a.is_square() {
        return Err(Error::dims(format!("{ctx} (square)"), a.rows(), a.cols()));
    }
    if !a.all_finite() {
        return Err(Error::NonFinite {
            context: ctx.to_string(),
        });
    }
    let lu = a.to_nalgebra().lu();
    let u = lu.u();
    let diag: Vec<f64> = (0..a.rows()).map(|i| u[(i, i)].abs()).collect();
    if diag.contains(&0.0) {
        return Err(Error::Singular(format!(
            "{ctx}: zero pivot in LU factorization"
        )));
    }
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if max / min > NEAR_SINGULAR_CONDITION {
        log::warn!(
            "{ctx}: near-singular system (pivot ratio {:.3e})",
            max / min
        );
    }
    Ok(lu)
}

/// Solves `A x = b` by LU with partial pivoting.
pub fn solve(a: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != a.rows() {
        return Err(Error::dims("solve right-hand side", a.rows(), b.len()));
    }
    let lu = lu_of(a, "solve")?;
    let x = lu
        .solve(&DVector::from_column_slice(b))
        .ok_or_else(|| Error::Singular("solve: LU back-substitution failed".into()))?;
    let x: Vec<f64> = x.iter().copied().collect();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("solve: non-finite solution".into()));
    }
    Ok(x)
}

/// Matrix inverse by LU.
pub fn inverse(a: &DenseMatrix) -> Result<DenseMatrix> {
    let lu = lu_of(a, "inverse")?;
    let inv = lu
        .try_inverse()
        .ok_or_else(|| Error::Singular("inverse: LU inversion failed".into()))?;
    let inv = DenseMatrix::from_nalgebra(&inv);
    if !inv.all_finite() {
        return Err(Error::Singular("inverse: non-finite entries".into()));
    }
    Ok(inv)
}

fn norm_1(a: &DenseMatrix) -> f64 {
    a.column_sums_abs().into_iter().fold(0.0, f64::max)
}

impl DenseMatrix {
    fn column_sums_abs(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (acc, x) in s.iter_mut().zip(self.row(i)) {
                *acc += x.abs();
            }
        }
        s
    }
}

/// 1-norm condition number `‖A‖₁ ‖A⁻¹‖₁`; infinite for singular input.
pub fn condition_number(a: &DenseMatrix) -> Result<f64> {
    match inverse(a) {
        Ok(inv) => Ok(norm_1(a) * norm_1(&inv)),
        Err(Error::Singular(_)) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

/// Row-compressed copy of a matrix, used for repeated products with
/// Laplacians in the time-stepping loops.
#[derive(Debug, Clone)]
pub struct SparseRows {
    n_cols: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn from_dense(a: &DenseMatrix) -> Self {
        let rows = (0..a.rows())
            .map(|i| {
                a.row(i)
                    .iter()
                    .enumerate()
                    .filter(|(_, &x)| x != 0.0)
                    .map(|(j, &x)| (j, x))
                    .collect()
            })
            .collect();
        Self {
            n_cols: a.cols(),
            rows,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    /// `out = A x` (no dimension checks; callers validate once up front).
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(&self.rows) {
            *o = row.iter().map(|&(j, a)| a * x[j]).sum();
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}
