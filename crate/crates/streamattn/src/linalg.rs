//! Dense row-major matrices and vector helpers sized for desk-scale
//! experiments. Everything is `f64`; storage is a flat `Vec` indexed as
//! `data[r * cols + c]`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            data: vec![0.0; rows * cols],
            rows,
            cols,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Mat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "Mat::from_vec",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Mat { data, rows, cols })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `self * x` for a column vector `x` of length `cols`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec width");
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            out[r] = dot(self.row(r), x);
        }
        out
    }

    /// `self^T * x` for a column vector `x` of length `rows`.
    pub fn tr_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "tr_matvec height");
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let xr = x[r];
            let row = self.row(r);
            for c in 0..self.cols {
                out[c] += row[c] * xr;
            }
        }
        out
    }

    /// `self += scale * a * b^T`.
    pub fn add_outer(&mut self, a: &[f64], b: &[f64], scale: f64) {
        assert_eq!(a.len(), self.rows, "add_outer height");
        assert_eq!(b.len(), self.cols, "add_outer width");
        for r in 0..self.rows {
            let ar = a[r] * scale;
            let row = self.row_mut(r);
            for c in 0..b.len() {
                row[c] += ar * b[c];
            }
        }
    }

    /// `self = diag(d) * self`, scaling row `r` by `d[r]`.
    pub fn scale_rows(&mut self, d: &[f64]) {
        assert_eq!(d.len(), self.rows, "scale_rows length");
        for r in 0..self.rows {
            let dr = d[r];
            for v in self.row_mut(r) {
                *v *= dr;
            }
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|v| v.is_finite())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Solves `(a + lambda I) w = b` for symmetric positive definite `a` by
/// Cholesky factorization. `a` is consumed as the workspace.
pub fn solve_spd(mut a: Mat, b: &[f64], lambda: f64, context: &'static str) -> Result<Vec<f64>> {
    let n = a.rows();
    assert_eq!(a.cols(), n, "solve_spd expects a square matrix");
    assert_eq!(b.len(), n, "solve_spd rhs length");
    for i in 0..n {
        let v = a.get(i, i) + lambda;
        a.set(i, i, v);
    }
    // Lower-triangular Cholesky factor stored in place.
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            let l = a.get(j, k);
            d -= l * l;
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::Singular {
                context,
                hint: "matrix is not positive definite; increase the ridge penalty lambda",
            });
        }
        let d = d.sqrt();
        a.set(j, j, d);
        for i in (j + 1)..n {
            let mut v = a.get(i, j);
            for k in 0..j {
                v -= a.get(i, k) * a.get(j, k);
            }
            a.set(i, j, v / d);
        }
    }
    // Forward substitution L y = b.
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= a.get(i, k) * y[k];
        }
        y[i] = v / a.get(i, i);
    }
    // Back substitution L^T w = y.
    let mut w = vec![0.0; n];
    for i in (0..n).rev() {
        let mut v = y[i];
        for k in (i + 1)..n {
            v -= a.get(k, i) * w[k];
        }
        w[i] = v / a.get(i, i);
    }
    Ok(w)
}
