//! Dense row-major `f32` matrices and the handful of kernels the engine needs.
//!
//! [`linear`] accumulates every output element in the same order no matter how
//! many rows are processed together, so a row's result never depends on the
//! other rows in the batch. The forward pass relies on this for exact prefix
//! consistency and bit-identical reruns.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Wraps `data` as a `rows x cols` matrix.
    ///
    /// Panics if the length does not match the shape.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data does not match shape");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f32) {
        self.data[i * self.cols + j] = value;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn column(&self, j: usize) -> Vec<f32> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Copies columns `start..end` of every row into a new matrix.
    pub fn columns(&self, start: usize, end: usize) -> Matrix {
        let width = end - start;
        let mut out = Matrix::zeros(self.rows, width);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[start..end]);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `x · w + bias` for every row of `x`; `w` is `[in, out]`. Accumulates in
/// `f64` over the inner dimension in a fixed order, so a row's result does
/// not depend on the other rows.
pub fn linear(x: &Matrix, w: &Matrix, bias: Option<&[f32]>) -> Matrix {
    assert_eq!(x.cols, w.rows, "linear: inner dimensions differ");
    let out_cols = w.cols;
    if let Some(b) = bias {
        assert_eq!(b.len(), out_cols, "linear: bias length");
    }
    let mut out = Matrix::zeros(x.rows, out_cols);
    const BLOCK: usize = 4;
    let mut acc = vec![0.0f64; BLOCK * out_cols];
    let mut start = 0;
    while start < x.rows {
        let end = (start + BLOCK).min(x.rows);
        let acc = &mut acc[..(end - start) * out_cols];
        match bias {
            Some(b) => {
                for row in acc.chunks_mut(out_cols) {
                    for (o, &bv) in row.iter_mut().zip(b) {
                        *o = bv as f64;
                    }
                }
            }
            None => acc.fill(0.0),
        }
        for k in 0..w.rows {
            let wk = w.row(k);
            for i in start..end {
                let a = x.data[i * x.cols + k] as f64;
                let dst = &mut acc[(i - start) * out_cols..(i - start + 1) * out_cols];
                for (o, &wv) in dst.iter_mut().zip(wk) {
                    *o += a * wv as f64;
                }
            }
        }
        for (o, &v) in out.data[start * out_cols..end * out_cols].iter_mut().zip(acc.iter()) {
            *o = v as f32;
        }
        start = end;
    }
    out
}

/// Row vector times matrix: `x · w` with `w` shaped `[x.len(), out]`.
pub fn vec_mat(x: &[f32], w: &Matrix) -> Vec<f32> {
    let m = Matrix::from_vec(1, x.len(), x.to_vec());
    linear(&m, w, None).into_vec()
}

/// `a · bᵀ` where `a` is `[m, k]` and `b` is `[n, k]`, via a blocked sgemm.
pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.cols, "matmul_transposed: inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = Matrix::zeros(m, n);
    if m == 0 || n == 0 {
        return out;
    }
    // SAFETY: pointers and strides describe the three owned buffers exactly:
    // a is m x k row-major, b is read as its k x n transpose (row stride 1,
    // column stride k) and out is m x n row-major.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            k as isize,
            1,
            b.data.as_ptr(),
            1,
            k as isize,
            0.0,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    acc.iter().sum::<f32>() + tail
}

/// Euclidean norm, accumulated in `f64`.
pub fn l2_norm(x: &[f32]) -> f64 {
    x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

pub fn add(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn scale(x: &[f32], c: f32) -> Vec<f32> {
    x.iter().map(|v| v * c).collect()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(x: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &Matrix, w: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), w.cols());
        for i in 0..x.rows() {
            for j in 0..w.cols() {
                let mut s = 0.0f64;
                for k in 0..x.cols() {
                    s += x.get(i, k) as f64 * w.get(k, j) as f64;
                }
                out.set(i, j, s as f32);
            }
        }
        out
    }

    fn filled(rows: usize, cols: usize, seed: u32) -> Matrix {
        let data = (0..rows * cols)
            .map(|i| (((i as u32).wrapping_mul(2654435761).wrapping_add(seed) % 1000) as f32 / 500.0) - 1.0)
            .collect();
        Matrix::from_vec(rows, cols, data)
    }

    #[test]
    fn linear_matches_naive_product() {
        let x = filled(7, 13, 1);
        let w = filled(13, 5, 2);
        let got = linear(&x, &w, None);
        let want = naive(&x, &w);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn linear_rows_do_not_depend_on_batch() {
        let x = filled(9, 11, 3);
        let w = filled(11, 6, 4);
        let full = linear(&x, &w, Some(&[0.5; 6]));
        for i in 0..x.rows() {
            let single = linear(&Matrix::from_vec(1, 11, x.row(i).to_vec()), &w, Some(&[0.5; 6]));
            assert_eq!(single.row(0), full.row(i));
        }
    }

    #[test]
    fn sgemm_transposed_matches_naive() {
        let a = filled(3, 10, 5);
        let b = filled(17, 10, 6);
        let got = matmul_transposed(&a, &b);
        let want = naive(&a, &b.transpose());
        for (x, y) in got.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }
}
