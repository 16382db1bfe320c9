//! Dense numeric primitives.
//!
//! Storage is `f32`, row-major. Every reduction (dot products, norms, softmax
//! normalizers) accumulates in `f64` and rounds once on the way out, so a
//! result row depends only on the matching input row and is bitwise
//! reproducible regardless of how rows are batched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
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

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &r in idx {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Frobenius norm, accumulated in 64-bit.
    pub fn frobenius(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }
}

/// `a · b` with 64-bit accumulation.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Dimension(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    let mut acc = vec![0.0f64; b.cols];
    for i in 0..a.rows {
        matvec_into(a.row(i), b, &mut acc);
        for (o, s) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = *s as f32;
        }
    }
    Ok(out)
}

/// `x · b` for a single row, accumulated into `acc` (overwritten).
///
/// Summation runs over `k` in ascending order for every output column.
pub(crate) fn matvec_into(x: &[f32], b: &Matrix, acc: &mut [f64]) {
    debug_assert_eq!(x.len(), b.rows);
    debug_assert_eq!(acc.len(), b.cols);
    acc.iter_mut().for_each(|v| *v = 0.0);
    for (k, &xk) in x.iter().enumerate() {
        let xk = f64::from(xk);
        for (s, &bkj) in acc.iter_mut().zip(b.row(k)) {
            *s += xk * f64::from(bkj);
        }
    }
}

/// `aᵀ · b`, returned as 64-bit values (a.cols × b.cols, row-major).
pub fn matmul_tn_f64(a: &Matrix, b: &Matrix) -> Result<Vec<f64>> {
    if a.rows != b.rows {
        return Err(Error::Dimension(format!(
            "transposed matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = vec![0.0f64; a.cols * b.cols];
    for r in 0..a.rows {
        let brow = b.row(r);
        for (i, &ai) in a.row(r).iter().enumerate() {
            let ai = f64::from(ai);
            if ai == 0.0 {
                continue;
            }
            let orow = &mut out[i * b.cols..(i + 1) * b.cols];
            for (o, &bj) in orow.iter_mut().zip(brow) {
                *o += ai * f64::from(bj);
            }
        }
    }
    Ok(out)
}

/// Elementwise `a + b` in 32-bit.
pub fn add(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "add {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data,
    })
}

/// Numerically stable softmax of a 64-bit slice, in place.
pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = libm::exp(*x - max);
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Row-wise softmax with max subtraction.
pub fn row_softmax(a: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows, a.cols);
    let mut buf = vec![0.0f64; a.cols];
    for r in 0..a.rows {
        for (b, &v) in buf.iter_mut().zip(a.row(r)) {
            *b = f64::from(v);
        }
        softmax_in_place(&mut buf);
        for (o, &p) in out.row_mut(r).iter_mut().zip(&buf) {
            *o = p as f32;
        }
    }
    out
}

#[inline]
pub(crate) fn gelu_scalar(x: f32) -> f32 {
    let x = f64::from(x);
    (0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))) as f32
}

/// Exact GELU, `x·Φ(x)` with Φ written through `erf`.
pub fn gelu(x: &Matrix) -> Matrix {
    Matrix {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().map(|&v| gelu_scalar(v)).collect(),
    }
}

/// RMS normalization of one row with a learned gain (no bias).
pub(crate) fn rms_norm_row(x: &[f32], gain: &[f32], eps: f64, out: &mut [f32]) {
    let ms = x.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = (f64::from(v) * inv * f64::from(g)) as f32;
    }
}

pub fn rms_norm(x: &Matrix, gain: &[f32], eps: f64) -> Result<Matrix> {
    if gain.len() != x.cols {
        return Err(Error::Dimension(format!(
            "norm gain of length {} for {} columns",
            gain.len(),
            x.cols
        )));
    }
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        rms_norm_row(x.row(r), gain, eps, out.row_mut(r));
    }
    Ok(out)
}

/// Σ over rows of ‖a_i − b_i‖², in 64-bit.
pub fn sum_sq_diff(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "compare {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn identity_is_exact() {
        let a = Matrix::from_rows(&[vec![0.3, -1.7], vec![2.5e-3, 9.0]]).unwrap();
        assert_eq!(matmul(&a, &Matrix::identity(2)).unwrap(), a);
        assert_eq!(matmul(&Matrix::identity(2), &a).unwrap(), a);
    }

    #[test]
    fn hand_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 7, 5);
        let b = random_matrix(&mut rng, 5, 3);
        let c = matmul(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut s = 0.0f64;
                for k in 0..5 {
                    s += f64::from(a.get(i, k)) * f64::from(b.get(k, j));
                }
                let got = f64::from(c.get(i, j));
                assert!((got - s).abs() <= 1e-6 * s.abs().max(1e-12), "{got} vs {s}");
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_cases() {
        let s = row_softmax(&Matrix::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap());
        for &p in s.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-7);
        }
        let s = row_softmax(&Matrix::from_rows(&[vec![1000.0, 0.0]]).unwrap());
        assert!((s.get(0, 0) - 1.0).abs() < 1e-6);
        assert!(s.get(0, 1).abs() < 1e-6);

        let s = row_softmax(&Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
        let z: f64 = (1..=3).map(|v| (v as f64).exp()).sum();
        for (j, v) in (1..=3).enumerate() {
            let expect = (v as f64).exp() / z;
            assert!((f64::from(s.get(0, j)) - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Matrix::from_vec(
            1000,
            17,
            (0..17_000).map(|_| rng.random_range(-30.0f32..30.0)).collect(),
        )
        .unwrap();
        let s = row_softmax(&a);
        for r in 0..1000 {
            let sum: f64 = s.row(r).iter().map(|&v| f64::from(v)).sum();
            assert!((sum - 1.0).abs() <= 1e-5);
            assert!(s.row(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn gelu_values() {
        let g = gelu(&Matrix::from_rows(&[vec![0.0, 10.0, 1.0]]).unwrap());
        assert_eq!(g.get(0, 0), 0.0);
        assert!((g.get(0, 1) - 10.0).abs() < 1e-6);
        // Φ(1) = 0.841344746068543 (64-bit erf reference)
        assert!((g.get(0, 2) - 0.841_344_7).abs() < 1e-7);
    }

    #[test]
    fn frobenius_of_identity() {
        assert!((Matrix::identity(4).frobenius() - 2.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn matmul_identity_property(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, rows, cols);
            prop_assert_eq!(&matmul(&a, &Matrix::identity(cols)).unwrap(), &a);
            prop_assert_eq!(&matmul(&Matrix::identity(rows), &a).unwrap(), &a);
        }

        #[test]
        fn ops_are_deterministic(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, 4, 6);
            let b = random_matrix(&mut rng, 6, 3);
            let c1 = matmul(&a, &b).unwrap();
            let c2 = matmul(&a, &b).unwrap();
            prop_assert_eq!(c1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            c2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(row_softmax(&a), row_softmax(&a));
            prop_assert_eq!(gelu(&a), gelu(&a));
        }
    }
}
