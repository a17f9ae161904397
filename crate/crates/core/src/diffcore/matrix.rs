use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of 64-bit reals.
///
/// Kernels below accumulate every output element in a fixed order that does
/// not depend on how many rows are processed together, so evaluating a batch
/// yields bitwise the same rows as evaluating each row alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn column_vector(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
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

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single value of a 1x1 matrix.
    pub fn item(&self) -> Result<f64> {
        if self.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "expected a scalar, found {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape(), other.shape());
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// `self · other` with the inner index accumulated in ascending order.
    pub fn matmul(&self, other: &Self) -> Self {
        debug_assert_eq!(self.cols, other.rows);
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `x · wᵀ + b` for a batch `x` (B×in), weights `w` (out×in), bias `b` (1×out).
///
/// Each output element is `b[o] + Σ_i x[r,i]·w[o,i]` summed over `i` in
/// ascending order, independent of the batch size.
pub(crate) fn affine_forward(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    let (batch, inputs) = x.shape();
    let outputs = w.rows();
    let wt = w.transpose();
    let mut out = Matrix::zeros(batch, outputs);
    for r in 0..batch {
        let out_row = &mut out.data[r * outputs..(r + 1) * outputs];
        out_row.copy_from_slice(&b.data);
        let x_row = &x.data[r * inputs..(r + 1) * inputs];
        for (i, &xi) in x_row.iter().enumerate() {
            let w_row = &wt.data[i * outputs..(i + 1) * outputs];
            for (o, &wv) in out_row.iter_mut().zip(w_row) {
                *o += xi * wv;
            }
        }
    }
    out
}

/// Gradient of an affine map with respect to its input: `g · w`.
pub(crate) fn affine_backward_input(g: &Matrix, w: &Matrix) -> Matrix {
    let (batch, outputs) = g.shape();
    let inputs = w.cols();
    let mut gx = Matrix::zeros(batch, inputs);
    for r in 0..batch {
        let gx_row = &mut gx.data[r * inputs..(r + 1) * inputs];
        for o in 0..outputs {
            let go = g.data[r * outputs + o];
            let w_row = &w.data[o * inputs..(o + 1) * inputs];
            for (gi, &wv) in gx_row.iter_mut().zip(w_row) {
                *gi += go * wv;
            }
        }
    }
    gx
}

/// Gradient of an affine map with respect to weights (`gᵀ · x`) and bias.
pub(crate) fn affine_backward_params(g: &Matrix, x: &Matrix) -> (Matrix, Matrix) {
    let (batch, outputs) = g.shape();
    let inputs = x.cols();
    let mut gw = Matrix::zeros(outputs, inputs);
    let mut gb = Matrix::zeros(1, outputs);
    for r in 0..batch {
        let x_row = &x.data[r * inputs..(r + 1) * inputs];
        for o in 0..outputs {
            let go = g.data[r * outputs + o];
            gb.data[o] += go;
            let gw_row = &mut gw.data[o * inputs..(o + 1) * inputs];
            for (gv, &xv) in gw_row.iter_mut().zip(x_row) {
                *gv += go * xv;
            }
        }
    }
    (gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_rows_do_not_depend_on_batch() {
        let x = Matrix::from_rows(&[vec![0.3, -1.2, 2.0], vec![1.5, 0.25, -0.75]]).unwrap();
        let w = Matrix::from_rows(&[vec![0.1, 0.2, 0.3], vec![-0.4, 0.5, -0.6]]).unwrap();
        let b = Matrix::row_vector(&[0.01, -0.02]);
        let both = affine_forward(&x, &w, &b);
        for r in 0..2 {
            let single = affine_forward(&Matrix::row_vector(x.row(r)), &w, &b);
            assert_eq!(single.row(0), both.row(r));
        }
    }

    #[test]
    fn matmul_matches_hand_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(a.matmul(&b).as_slice(), &[2.0, 1.0, 4.0, 3.0]);
        assert_eq!(a.transpose().as_slice(), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn item_requires_scalar() {
        assert!(Matrix::zeros(1, 2).item().is_err());
        assert_eq!(Matrix::scalar(4.0).item().unwrap(), 4.0);
    }
}
