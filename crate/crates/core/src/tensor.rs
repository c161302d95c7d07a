// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major `f64` matrices.
//!
//! Samples are rows: a batch of `B` activation vectors of width `d` is a
//! `B x d` matrix, so the decoder map is a plain right-multiplication.

use std::fmt;

use rand_distr::{Distribution, Normal};

use crate::error::{Result, SaeError};
use crate::rng::RngState;

// Column and reduction block sizes for `matmul`. A 64x256 f64 panel of the
// right operand stays resident in L2.
const COL_BLOCK: usize = 256;
const RED_BLOCK: usize = 64;

/// `out += sum_t a_t * row(p_t)`, accumulated in the order of `terms`.
///
/// Four terms are folded per pass so each output element is loaded and
/// stored once per four products; the left-to-right evaluation keeps the
/// rounding identical to one term at a time.
fn accumulate_rows<'a>(out: &mut [f64], terms: &[(f64, usize)], row: impl Fn(usize) -> &'a [f64]) {
    let mut octs = terms.chunks_exact(8);
    for q in &mut octs {
        let a: [f64; 8] = std::array::from_fn(|t| q[t].0);
        let r: [&[f64]; 8] = std::array::from_fn(|t| &row(q[t].1)[..out.len()]);
        for (j, o) in out.iter_mut().enumerate() {
            *o = *o
                + a[0] * r[0][j]
                + a[1] * r[1][j]
                + a[2] * r[2][j]
                + a[3] * r[3][j]
                + a[4] * r[4][j]
                + a[5] * r[5][j]
                + a[6] * r[6][j]
                + a[7] * r[7][j];
        }
    }
    let mut quads = octs.remainder().chunks_exact(4);
    for q in &mut quads {
        let (a0, a1, a2, a3) = (q[0].0, q[1].0, q[2].0, q[3].0);
        let (r0, r1, r2, r3) = (row(q[0].1), row(q[1].1), row(q[2].1), row(q[3].1));
        for ((((o, &b0), &b1), &b2), &b3) in out.iter_mut().zip(r0).zip(r1).zip(r2).zip(r3) {
            *o = *o + a0 * b0 + a1 * b1 + a2 * b2 + a3 * b3;
        }
    }
    for &(a, p) in quads.remainder() {
        for (o, &b) in out.iter_mut().zip(row(p)) {
            *o += a * b;
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list()
                .entries(self.data.chunks(self.cols.max(1)))
                .finish()
        } else {
            write!(f, "[..]")
        }
    }
}

impl Matrix {
    /// Builds a matrix from a row-major buffer. All entries must be finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(SaeError::DataLength {
                rows,
                cols,
                got: data.len(),
            });
        }
        let m = Self { rows, cols, data };
        m.ensure_finite("Matrix::new")?;
        Ok(m)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from nested rows; every row must have the same length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(SaeError::ShapeMismatch {
                    op: "from_rows",
                    left: (1, cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// A `1 x n` row vector.
    pub fn row_vector(values: &[f64]) -> Result<Self> {
        Self::new(1, values.len(), values.to_vec())
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks(0) panics; an empty matrix has no rows worth yielding anyway.
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(SaeError::NonFinite(what))
        }
    }

    fn checked(self, what: &'static str) -> Result<Self> {
        self.ensure_finite(what)?;
        Ok(self)
    }

    fn same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(SaeError::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    /// Matrix product `self * other`.
    ///
    /// Cache-blocked i-k-j loop. Each output element accumulates its
    /// products in increasing reduction index, independent of blocking.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(SaeError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(n, m);
        let mut nz: Vec<(f64, usize)> = Vec::with_capacity(RED_BLOCK);
        for jb in (0..m).step_by(COL_BLOCK) {
            let je = (jb + COL_BLOCK).min(m);
            for pb in (0..k).step_by(RED_BLOCK) {
                let pe = (pb + RED_BLOCK).min(k);
                for i in 0..n {
                    nz.clear();
                    nz.extend(
                        self.data[i * k + pb..i * k + pe]
                            .iter()
                            .enumerate()
                            .filter(|(_, &a)| a != 0.0)
                            .map(|(p, &a)| (a, pb + p)),
                    );
                    let o_row = &mut out.data[i * m + jb..i * m + je];
                    accumulate_rows(o_row, &nz, |p| &other.data[p * m + jb..p * m + je]);
                }
            }
        }
        out.checked("matmul")
    }

    /// `self^T * other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(SaeError::ShapeMismatch {
                op: "t_matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (k, n, m) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(n, m);
        let mut nz: Vec<(f64, usize)> = Vec::with_capacity(k);
        for i in 0..n {
            nz.clear();
            nz.extend(
                (0..k)
                    .map(|p| (self.data[p * n + i], p))
                    .filter(|&(a, _)| a != 0.0),
            );
            let o_row = &mut out.data[i * m..(i + 1) * m];
            accumulate_rows(o_row, &nz, |p| &other.data[p * m..(p + 1) * m]);
        }
        out.checked("t_matmul")
    }

    /// Adds a `1 x cols` bias to every row.
    pub fn add_row_broadcast(&self, bias: &Matrix) -> Result<Matrix> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(SaeError::ShapeMismatch {
                op: "add_row_broadcast",
                left: self.shape(),
                right: bias.shape(),
            });
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.cols.max(1)) {
            for (o, &b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        out.checked("add_row_broadcast")
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Result<Matrix> {
        self.map(|v| v * s).checked("scale")
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    fn zip_with(
        &self,
        other: &Matrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        self.same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
        .checked(op)
    }

    /// Elementwise map. Callers are responsible for keeping results finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// L2 norm of every row, as an `rows x 1` column.
    pub fn row_norms(&self) -> Matrix {
        let data = self
            .row_iter()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        Matrix {
            rows: self.rows,
            cols: 1,
            data,
        }
    }

    /// Column sums as a `1 x cols` row.
    pub fn col_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for row in self.row_iter() {
            for (o, &v) in out.data.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    /// Sum of squared entries.
    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Copies rows `start..end` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack(parts: &[Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |p| p.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(SaeError::ShapeMismatch {
                    op: "vstack",
                    left: (rows, cols),
                    right: p.shape(),
                });
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Matrix { rows, cols, data })
    }
}

/// I.i.d. normal entries with the given standard deviation.
pub fn gauss_matrix(rng: &mut RngState, rows: usize, cols: usize, stddev: f64) -> Result<Matrix> {
    if !(stddev >= 0.0) || !stddev.is_finite() {
        return Err(SaeError::InvalidArgument(format!(
            "stddev must be finite and >= 0, got {stddev}"
        )));
    }
    if stddev == 0.0 {
        return Ok(Matrix::zeros(rows, cols));
    }
    let normal = Normal::new(0.0, stddev).expect("validated stddev");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Ok(Matrix { rows, cols, data })
}
