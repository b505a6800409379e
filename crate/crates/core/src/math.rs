//! Dense float kernels for the transformer.
//!
//! All kernels are plain loops arranged so the inner dimension is
//! contiguous (the compiler autovectorizes them) and parallelism is
//! per-output-row, which keeps results bitwise deterministic regardless
//! of thread count. Everything is generic over `f32`/`f64`: training runs
//! in single precision, gradient checking in double.

use num_traits::Float;
use rayon::prelude::*;

/// Scalar type for model arithmetic.
pub trait Scalar:
    Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + Send
    + Sync
    + std::fmt::Debug
    + Default
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// c[m x n] = a[m x k] * b[k x n], accumulating when `acc` is set.
pub fn mm_ab<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize, acc: bool) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    c.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        if !acc {
            row.fill(T::zero());
        }
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cj, &bj) in row.iter_mut().zip(b_row) {
                *cj += aik * bj;
            }
        }
    });
}

/// c[m x n] = a[m x k] * b^T, where b is [n x k] row-major.
pub fn mm_abt<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize, acc: bool) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    c.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, cj) in row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: T = a_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum();
            if acc {
                *cj += dot;
            } else {
                *cj = dot;
            }
        }
    });
}

/// c[k x n] = a^T * b with a[m x k], b[m x n], accumulating when `acc`.
pub fn mm_atb<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize, acc: bool) {
    debug_assert_eq!(c.len(), k * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    c.par_chunks_mut(n).enumerate().for_each(|(kk, row)| {
        if !acc {
            row.fill(T::zero());
        }
        for i in 0..m {
            let aik = a[i * k + kk];
            if aik == T::zero() {
                continue;
            }
            let b_row = &b[i * n..(i + 1) * n];
            for (cj, &bj) in row.iter_mut().zip(b_row) {
                *cj += aik * bj;
            }
        }
    });
}

/// y += alpha * x
pub fn axpy<T: Scalar>(y: &mut [T], alpha: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// In-place softmax over a slice; subtracts the max for stability.
pub fn softmax_inplace<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Log-sum-exp of a slice (stable).
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mm_ab_matches_hand_example() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        mm_ab(&mut c, &a, &b, 2, 2, 2, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transpose_kernels_agree_with_mm_ab() {
        let m = 3;
        let k = 4;
        let n = 5;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.73).cos()).collect();
        let mut c = vec![0.0; m * n];
        mm_ab(&mut c, &a, &b, m, k, n, false);

        // b transposed into [n x k] then mm_abt must agree.
        let mut bt = vec![0.0; n * k];
        for kk in 0..k {
            for j in 0..n {
                bt[j * k + kk] = b[kk * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        mm_abt(&mut c2, &a, &bt, m, k, n, false);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }

        // mm_atb(a, b2) must equal mm_ab(a^T, b2).
        let b2: Vec<f64> = (0..m * n).map(|i| (i as f64 * 0.11).sin()).collect();
        let mut c3 = vec![0.0; k * n];
        mm_atb(&mut c3, &a, &b2, m, k, n, false);
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for kk in 0..k {
                at[kk * m + i] = a[i * k + kk];
            }
        }
        let mut c4 = vec![0.0; k * n];
        mm_ab(&mut c4, &at, &b2, k, m, n, false);
        for (x, y) in c3.iter().zip(&c4) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut row = vec![0.5f32, -1.0, 2.0, 0.0];
        softmax_inplace(&mut row);
        let sum: f32 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
}
