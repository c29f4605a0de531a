//! Raw numeric kernels shared by the graph and by non-differentiated code paths.
//!
//! Every reduction accumulates left-to-right in row-major order.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// `c[m×n] = a[m×k] · b[k×n]`
pub fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// `c[k×n] = a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

pub fn transpose_raw<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    Tensor::new(&[m, n], matmul_raw(a.data(), b.data(), m, k, n))
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = a.dims2()?;
    Tensor::new(&[c, r], transpose_raw(a.data(), r, c))
}

/// Applies disjoint plane rotations to the rows of `x[rows×cols]`.
///
/// For pair `(i, j)` with angle `θ` and `s = sign·sin θ`:
/// `y_i = x_i cos θ − x_j s`, `y_j = x_i s + x_j cos θ`. Rows not named in
/// any pair pass through. `sign = +1` is counter-clockwise.
pub fn rotate_row_pairs<T: Scalar>(
    x: &[T],
    cols: usize,
    pairs: &[(usize, usize)],
    angles: &[T],
    sign: T,
) -> Vec<T> {
    let mut y = x.to_vec();
    for (&(i, j), &theta) in pairs.iter().zip(angles) {
        let (c, s) = (theta.cos(), sign * theta.sin());
        for col in 0..cols {
            let xi = x[i * cols + col];
            let xj = x[j * cols + col];
            y[i * cols + col] = xi * c - xj * s;
            y[j * cols + col] = xi * s + xj * c;
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn transposed_variants_agree_with_plain_product() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        let bt = transpose_raw(&b, k, n);
        let nt = matmul_nt_raw(&a, &bt, m, k, n);
        let at = transpose_raw(&a, m, k);
        let tn = matmul_tn_raw(&at, &b, k, m, n);
        for i in 0..m * n {
            assert!((want[i] - nt[i]).abs() < 1e-12);
            assert!((want[i] - tn[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn quarter_turn() {
        let x = [1.0f64, 0.0];
        let y = rotate_row_pairs(&x, 1, &[(0, 1)], &[std::f64::consts::FRAC_PI_2], 1.0);
        assert!(y[0].abs() < 1e-15 && (y[1] - 1.0).abs() < 1e-15);
        let y = rotate_row_pairs(&x, 1, &[(0, 1)], &[std::f64::consts::FRAC_PI_2], -1.0);
        assert!(y[0].abs() < 1e-15 && (y[1] + 1.0).abs() < 1e-15);
    }
}
