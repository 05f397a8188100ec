//! Dense matrices and the small set of exact operations the adapters need.
//!
//! Everything is `f64` and row-major. The one place orientation actually
//! matters is the `vec`/`unvec` pair: the Kronecker identity
//!
//! ```text
//! (A (x) B) * vec(X) == vec(B * X * A^T)
//! ```
//!
//! holds when `vec` stacks *columns*, so [`vec_reshape`] and [`vec_flatten`]
//! are column-major by contract even though storage is row-major. The
//! factored adapter forward pass is built entirely on that identity.

use crate::error::{Error, Result};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

/// Default relative tolerance for [`numerical_rank`]: pivots no larger than
/// `1e-8 * max_abs_entry` count as zero.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

/// Row-major dense matrix of `f64` with positive dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from a row-major buffer. The buffer length must be `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                op: "from_vec",
                expected: rows * cols,
                got: data.len(),
            });
        }
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Ok(DenseMatrix { rows, cols, data })
    }

    /// Build from explicit rows; handy in tests.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        assert!(!rows.is_empty() && !rows[0].is_empty());
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        DenseMatrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// Matrix with i.i.d. normal entries of the given standard deviation.
    pub fn random_normal(rows: usize, cols: usize, std_dev: f64, rng: &mut Rng) -> Self {
        let mut m = DenseMatrix::zeros(rows, cols);
        m.fill_normal(std_dev, rng);
        m
    }

    pub fn fill_normal(&mut self, std_dev: f64, rng: &mut Rng) {
        for v in &mut self.data {
            *v = rng.normal(0.0, std_dev);
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// `self * rhs`. Inner dimensions must agree.
    pub fn matmul(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::shape("matmul", self.shape(), rhs.shape()));
        }
        let n = rhs.cols;
        let mut out = vec![0.0; self.rows * n];
        for i in 0..self.rows {
            let a_row = &self.data[i * self.cols..(i + 1) * self.cols];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (k, &a_ik) in a_row.iter().enumerate() {
                let b_row = &rhs.data[k * n..(k + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a_ik * b;
                }
            }
        }
        debug_assert!(out.iter().all(|v| v.is_finite()), "matmul produced non-finite values");
        Ok(DenseMatrix {
            rows: self.rows,
            cols: n,
            data: out,
        })
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Kronecker product: block (i, j) of the result is `self[i,j] * rhs`.
    pub fn kron(&self, rhs: &DenseMatrix) -> DenseMatrix {
        let rows = self.rows * rhs.rows;
        let cols = self.cols * rhs.cols;
        let mut data = vec![0.0; rows * cols];
        for i in 0..self.rows {
            for j in 0..self.cols {
                let a_ij = self.get(i, j);
                for p in 0..rhs.rows {
                    let dst = (i * rhs.rows + p) * cols + j * rhs.cols;
                    let src = p * rhs.cols;
                    for q in 0..rhs.cols {
                        data[dst + q] = a_ij * rhs.data[src + q];
                    }
                }
            }
        }
        DenseMatrix { rows, cols, data }
    }

    /// Elementwise sum.
    pub fn add(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        let mut out = self.clone();
        out.add_scaled(rhs, 1.0)?;
        Ok(out)
    }

    /// Elementwise difference.
    pub fn sub(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        let mut out = self.clone();
        out.add_scaled(rhs, -1.0)?;
        Ok(out)
    }

    /// `self += scale * rhs`, in place.
    pub fn add_scaled(&mut self, rhs: &DenseMatrix, scale: f64) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape("add_scaled", self.shape(), rhs.shape()));
        }
        for (o, &r) in self.data.iter_mut().zip(&rhs.data) {
            *o += scale * r;
        }
        Ok(())
    }

    /// Elementwise product (used for dropout masks).
    pub fn hadamard(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape("hadamard", self.shape(), rhs.shape()));
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| s * v).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, rhs: &DenseMatrix) -> Result<f64> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape("max_abs_diff", self.shape(), rhs.shape()));
        }
        Ok(self
            .data
            .iter()
            .zip(&rhs.data)
            .fold(0.0, |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// Copy of columns `[start, start + count)`.
    pub fn columns(&self, start: usize, count: usize) -> DenseMatrix {
        assert!(count > 0 && start + count <= self.cols, "column range out of bounds");
        let mut out = DenseMatrix::zeros(self.rows, count);
        for i in 0..self.rows {
            for j in 0..count {
                out.set(i, j, self.get(i, start + j));
            }
        }
        out
    }

    /// Bitwise equality, distinguishing e.g. -0.0 from 0.0. Used by
    /// checkpoint round-trip checks.
    pub fn bit_eq(&self, rhs: &DenseMatrix) -> bool {
        self.shape() == rhs.shape()
            && self
                .data
                .iter()
                .zip(&rhs.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Column-major reshape of a column vector into a `rows_m x cols_m` matrix:
/// the inverse of [`vec_flatten`]. Entry `(i, j)` of the result is
/// `v[i + j * rows_m]`.
pub fn vec_reshape(v: &DenseMatrix, rows_m: usize, cols_m: usize) -> Result<DenseMatrix> {
    if v.cols() != 1 {
        return Err(Error::shape("vec_reshape", v.shape(), (rows_m * cols_m, 1)));
    }
    if v.rows() != rows_m * cols_m {
        return Err(Error::LengthMismatch {
            op: "vec_reshape",
            expected: rows_m * cols_m,
            got: v.rows(),
        });
    }
    let mut out = DenseMatrix::zeros(rows_m, cols_m);
    for j in 0..cols_m {
        for i in 0..rows_m {
            out.set(i, j, v.data[i + j * rows_m]);
        }
    }
    Ok(out)
}

/// Column-major flatten: stacks the columns of `m` into a single column
/// vector of length `rows * cols`.
pub fn vec_flatten(m: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(m.rows() * m.cols(), 1);
    for j in 0..m.cols() {
        for i in 0..m.rows() {
            out.data[i + j * m.rows()] = m.get(i, j);
        }
    }
    out
}

/// Column-major reshape of one column of `x` into a `rows_m x cols_m`
/// matrix, without materializing the intermediate vector.
pub(crate) fn unvec_column(
    x: &DenseMatrix,
    col: usize,
    rows_m: usize,
    cols_m: usize,
) -> DenseMatrix {
    debug_assert_eq!(x.rows(), rows_m * cols_m);
    let mut out = DenseMatrix::zeros(rows_m, cols_m);
    for j in 0..cols_m {
        for i in 0..rows_m {
            out.set(i, j, x.get(i + j * rows_m, col));
        }
    }
    out
}

/// Column-major flatten of `m` written into column `col` of `out`.
pub(crate) fn flatten_into_column(m: &DenseMatrix, out: &mut DenseMatrix, col: usize) {
    debug_assert_eq!(out.rows(), m.rows() * m.cols());
    for j in 0..m.cols() {
        for i in 0..m.rows() {
            out.set(i + j * m.rows(), col, m.get(i, j));
        }
    }
}

/// Numerical rank via Gaussian elimination with partial pivoting.
///
/// A pivot whose absolute value is at most `tol * max_abs_entry(m)` counts
/// as zero; the scale reference is the original matrix, so the result is
/// invariant under global rescaling. `tol` must be positive; see
/// [`DEFAULT_RANK_TOL`].
pub fn numerical_rank(m: &DenseMatrix, tol: f64) -> usize {
    assert!(tol > 0.0, "rank tolerance must be positive");
    let max_abs = m.max_abs();
    if max_abs == 0.0 {
        return 0;
    }
    let threshold = tol * max_abs;
    let (rows, cols) = m.shape();
    let mut a = m.data.clone();
    let mut rank = 0;
    let mut pivot_row = 0;
    for col in 0..cols {
        if pivot_row == rows {
            break;
        }
        // Partial pivoting: bring the largest remaining entry of this
        // column to the pivot position.
        let mut best = pivot_row;
        for r in pivot_row + 1..rows {
            if a[r * cols + col].abs() > a[best * cols + col].abs() {
                best = r;
            }
        }
        if a[best * cols + col].abs() <= threshold {
            continue;
        }
        if best != pivot_row {
            for c in 0..cols {
                a.swap(pivot_row * cols + c, best * cols + c);
            }
        }
        let pivot = a[pivot_row * cols + col];
        for r in pivot_row + 1..rows {
            let factor = a[r * cols + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            for c in col..cols {
                a[r * cols + c] -= factor * a[pivot_row * cols + c];
            }
        }
        rank += 1;
        pivot_row += 1;
    }
    rank
}
