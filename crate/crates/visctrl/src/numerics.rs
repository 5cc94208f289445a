//! Minimal dense kernels: matrix multiply, row softmax and scaled
//! dot-product attention.
//!
//! Values are stored as `f32`; every reduction accumulates in `f64` with a
//! fixed loop order so results are bit-identical across runs and build
//! flags. There is deliberately no fused attention kernel: the attention
//! map is materialized so it can be captured and dumped as a diagnostic.

use crate::error::{Error, Result};

/// Dense row-major matrix of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting length mismatches and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "matrix entry {bad} is not finite"
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Internal constructor for values already known finite.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f32>) -> Matrix {
        debug_assert_eq!(data.len(), rows * cols);
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Bit-level equality (distinguishes values `==` would conflate).
    pub fn bit_eq(&self, other: &Matrix) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Rank-3 grid (`h` x `w` x `c`, h-major then w then c) holding a latent
/// code or an image plane, all entries finite `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f32>,
}

impl Tensor3 {
    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Tensor3> {
        if data.len() != h * w * c {
            return Err(Error::Shape(format!(
                "tensor data length {} does not match {}x{}x{}",
                data.len(),
                h,
                w,
                c
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "tensor entry {bad} is not finite"
            )));
        }
        Ok(Tensor3 { h, w, c, data })
    }

    pub(crate) fn from_raw(h: usize, w: usize, c: usize, data: Vec<f32>) -> Tensor3 {
        debug_assert_eq!(data.len(), h * w * c);
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Tensor3 { h, w, c, data }
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Tensor3 {
        Tensor3 {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[(i * self.w + j) * self.c + k]
    }

    /// Lossless reshape to a `(h*w) x c` token matrix.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_raw(self.h * self.w, self.c, self.data.clone())
    }

    /// Inverse of [`Tensor3::to_matrix`]; `m.rows()` must equal `h*w`.
    pub fn from_matrix(m: &Matrix, h: usize, w: usize) -> Result<Tensor3> {
        if m.rows() != h * w {
            return Err(Error::Shape(format!(
                "matrix rows {} do not match {}x{} grid",
                m.rows(),
                h,
                w
            )));
        }
        Ok(Tensor3::from_raw(h, w, m.cols(), m.data().to_vec()))
    }

    /// Elementwise map, computed in `f64` and stored back as `f32`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor3> {
        let data: Vec<f32> = self.data.iter().map(|&v| f(v as f64) as f32).collect();
        Tensor3::from_vec(self.h, self.w, self.c, data).map_err(|_| {
            Error::Domain("elementwise map produced a non-finite value".into())
        })
    }

    /// Elementwise combine of two same-shape tensors in `f64`.
    pub fn zip_with(&self, other: &Tensor3, f: impl Fn(f64, f64) -> f64) -> Result<Tensor3> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "tensor shapes {:?} and {:?} differ",
                self.shape(),
                other.shape()
            )));
        }
        let data: Vec<f32> = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a as f64, b as f64) as f32)
            .collect();
        Tensor3::from_vec(self.h, self.w, self.c, data).map_err(|_| {
            Error::Domain("elementwise combine produced a non-finite value".into())
        })
    }

    pub fn bit_eq(&self, other: &Tensor3) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Standard matrix product with a fixed `(i, j, k)` loop order and `f64`
/// accumulation; never reassociated, so the result is deterministic.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul inner dims differ: {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = vec![0.0f32; a.rows * b.cols];
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0f64;
            for k in 0..a.cols {
                acc += a.data[i * a.cols + k] as f64 * b.data[k * b.cols + j] as f64;
            }
            out[i * b.cols + j] = acc as f32;
        }
    }
    Matrix::from_vec(a.rows, b.cols, out)
        .map_err(|_| Error::Domain("matmul overflowed f32 range".into()))
}

/// Row-wise softmax; the row max is subtracted before exponentiation so
/// large magnitudes cannot overflow. Each output row sums to 1.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = vec![0.0f32; m.data.len()];
    for r in 0..m.rows {
        let row = m.row(r);
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let mut sum = 0.0f64;
        let mut exps = vec![0.0f64; m.cols];
        for (j, &v) in row.iter().enumerate() {
            let e = (v as f64 - max).exp();
            exps[j] = e;
            sum += e;
        }
        for j in 0..m.cols {
            out[r * m.cols + j] = (exps[j] / sum) as f32;
        }
    }
    Matrix::from_raw(m.rows, m.cols, out)
}

/// Scaled dot-product attention. Returns the output together with the
/// attention map so callers can capture or dump it.
///
/// `attn_map = softmax(q k^T / sqrt(d))`, `out = attn_map v`.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix, d: usize) -> Result<(Matrix, Matrix)> {
    if q.cols != d || k.cols != d {
        return Err(Error::Shape(format!(
            "attention dims: q cols {} and k cols {} must both equal d = {}",
            q.cols, k.cols, d
        )));
    }
    if k.rows != v.rows {
        return Err(Error::Shape(format!(
            "attention: k rows {} != v rows {}",
            k.rows, v.rows
        )));
    }
    let scale = 1.0f64 / (d as f64).sqrt();
    let mut scores = vec![0.0f32; q.rows * k.rows];
    for i in 0..q.rows {
        for j in 0..k.rows {
            let mut acc = 0.0f64;
            for t in 0..d {
                acc += q.data[i * d + t] as f64 * k.data[j * d + t] as f64;
            }
            scores[i * k.rows + j] = (acc * scale) as f32;
        }
    }
    let attn_map = softmax_rows(&Matrix::from_raw(q.rows, k.rows, scores));
    let out = matmul(&attn_map, v)?;
    Ok((out, attn_map))
}
