//! Dense row-major 2-D tensors and the few matmul kernels everything runs on.
//!
//! Kernels are deliberately single-threaded and accumulate in a fixed order,
//! so a [1 x k] @ [k x n] product is bit-identical to the corresponding row of
//! an [m x k] @ [k x n] product. Incremental decoding relies on this.

use crate::rng::SeededRng;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length mismatch");
        Self { rows, cols, data }
    }

    pub fn full(rows: usize, cols: usize, value: T) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Self {
        let data = (0..rows * cols).map(|_| T::from_f64(rng.normal() * std)).collect();
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Reinterpret as a different shape with the same element count.
    pub fn reshaped(&self, rows: usize, cols: usize) -> Tensor<T> {
        assert_eq!(rows * cols, self.data.len(), "reshape must preserve length");
        Tensor { rows, cols, data: self.data.clone() }
    }

    /// Single scalar value of a [1 x 1] tensor.
    pub fn scalar(&self) -> T {
        assert_eq!(self.data.len(), 1, "scalar() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale_assign(&mut self, c: T) {
        for a in self.data.iter_mut() {
            *a *= c;
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|v| v.as_f64() as f32).collect()
    }
}

/// out[m x n] = a[m x k] @ b[k x n]
pub fn matmul_nn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.cols, b.rows, "matmul shape mismatch: {:?} @ {:?}", a.shape(), b.shape());
    let (m, n) = (a.rows, b.cols);
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b.data[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// out[m x n] = a[m x k] @ b[n x k]^T
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.cols, b.cols, "matmul_nt shape mismatch: {:?} @ {:?}^T", a.shape(), b.shape());
    let (m, n) = (a.rows, b.rows);
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for j in 0..n {
            let brow = b.row(j);
            let mut acc = T::zero();
            for (x, y) in arow.iter().zip(brow) {
                acc += *x * *y;
            }
            orow[j] = acc;
        }
    }
    out
}

/// out[m x n] = a[k x m]^T @ b[k x n]
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.rows, b.rows, "matmul_tn shape mismatch: {:?}^T @ {:?}", a.shape(), b.shape());
    let (k, m, n) = (a.rows, a.cols, b.cols);
    let mut out = Tensor::zeros(m, n);
    for kk in 0..k {
        let arow = a.row(kk);
        let brow = b.row(kk);
        for i in 0..m {
            let av = arow[i];
            let orow = &mut out.data[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_mm(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let mut out = Tensor::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.at(i, k) * b.at(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = SeededRng::new(7);
        let a: Tensor<f64> = Tensor::randn(5, 3, 1.0, &mut rng);
        let b: Tensor<f64> = Tensor::randn(3, 4, 1.0, &mut rng);
        let want = naive_mm(&a, &b);

        let nn = matmul_nn(&a, &b);
        // b^T has shape 4x3; a @ (b^T)^T == a @ b
        let bt = {
            let mut t = Tensor::zeros(4, 3);
            for i in 0..3 {
                for j in 0..4 {
                    t.set(j, i, b.at(i, j));
                }
            }
            t
        };
        let nt = matmul_nt(&a, &bt);
        let at = {
            let mut t = Tensor::zeros(3, 5);
            for i in 0..5 {
                for j in 0..3 {
                    t.set(j, i, a.at(i, j));
                }
            }
            t
        };
        let tn = matmul_tn(&at, &b);

        for t in [&nn, &nt, &tn] {
            for (x, y) in t.as_slice().iter().zip(want.as_slice()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_row_matches_full_matmul_bitwise() {
        let mut rng = SeededRng::new(11);
        let a: Tensor<f32> = Tensor::randn(6, 32, 1.0, &mut rng);
        let b: Tensor<f32> = Tensor::randn(32, 16, 1.0, &mut rng);
        let full = matmul_nn(&a, &b);
        for i in 0..a.rows() {
            let row = Tensor::from_vec(1, 32, a.row(i).to_vec());
            let one = matmul_nn(&row, &b);
            assert_eq!(one.as_slice(), full.row(i), "row {i} differs");
        }
    }
}
