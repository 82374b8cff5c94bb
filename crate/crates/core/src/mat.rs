//! Dense row-major f64 matrix and the handful of kernels everything else
//! builds on.
//!
//! All loops run in a fixed order so that results are bitwise reproducible
//! regardless of thread count; parallelism, where used, stays at the
//! shape/row level with sequential reductions inside each row.

use crate::error::{Error, Result};

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec size mismatch");
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    /// 1xN row vector.
    pub fn row_vec(data: Vec<f64>) -> Self {
        Mat { rows: 1, cols: data.len(), data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::non_finite(what.to_string()))
        }
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Frobenius dot product of same-shape matrices.
    pub fn dot_all(&self, other: &Mat) -> f64 {
        debug_assert_eq!(self.data.len(), other.data.len());
        let mut acc = 0.0;
        for (a, b) in self.data.iter().zip(other.data.iter()) {
            acc += a * b;
        }
        acc
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn add_in_place(&mut self, other: &Mat) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    /// self += s * other
    pub fn add_scaled_in_place(&mut self, other: &Mat, s: f64) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += s * b;
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Cast to little-endian f32 bytes (the on-disk precision).
    pub fn to_f32_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_f32_slice(rows: usize, cols: usize, data: &[f32]) -> Self {
        assert_eq!(data.len(), rows * cols);
        Mat { rows, cols, data: data.iter().map(|&v| v as f64).collect() }
    }
}

/// C = A * B
pub fn mm_nn(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "mm_nn inner dim");
    let mut c = Mat::zeros(a.rows, b.cols);
    mm_nn_acc(a, b, &mut c);
    c
}

/// C += A * B, ikj order so the inner loop streams rows of B.
pub fn mm_nn_acc(a: &Mat, b: &Mat, c: &mut Mat) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(c.rows, m);
    debug_assert_eq!(c.cols, n);
    for i in 0..m {
        let crow = &mut c.data[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a.data[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[l * n..(l + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// C = A * B^T (rows of both operands are contiguous dot products).
pub fn mm_nt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols, "mm_nt inner dim");
    let mut c = Mat::zeros(a.rows, b.rows);
    mm_nt_acc(a, b, &mut c);
    c
}

/// C += A * B^T
pub fn mm_nt_acc(a: &Mat, b: &Mat, c: &mut Mat) {
    let (m, k, n) = (a.rows, a.cols, b.rows);
    debug_assert_eq!(a.cols, b.cols);
    debug_assert_eq!(c.rows, m);
    debug_assert_eq!(c.cols, n);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let crow = &mut c.data[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for l in 0..k {
                acc += arow[l] * brow[l];
            }
            crow[j] += acc;
        }
    }
}

/// C = A^T * B
pub fn mm_tn(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows, b.rows, "mm_tn inner dim");
    let mut c = Mat::zeros(a.cols, b.cols);
    mm_tn_acc(a, b, &mut c);
    c
}

/// C += A^T * B
pub fn mm_tn_acc(a: &Mat, b: &Mat, c: &mut Mat) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    debug_assert_eq!(a.rows, b.rows);
    debug_assert_eq!(c.rows, k);
    debug_assert_eq!(c.cols, n);
    for l in 0..m {
        let arow = &a.data[l * k..(l + 1) * k];
        let brow = &b.data[l * n..(l + 1) * n];
        for i in 0..k {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c.data[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// Unit-normalize a vector in place; a (near-)zero vector is left as zeros.
pub fn unit_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-12 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    } else {
        for x in v.iter_mut() {
            *x = 0.0;
        }
    }
}

/// Unit-normalize every row of a matrix.
pub fn unit_normalize_rows(m: &mut Mat) {
    let cols = m.cols;
    for r in 0..m.rows {
        unit_normalize(&mut m.data[r * cols..(r + 1) * cols]);
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}
