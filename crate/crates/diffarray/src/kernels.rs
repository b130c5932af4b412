//! Dense loops shared by forward and backward passes.
//!
//! Every reduction walks its index range in ascending order, so results are
//! bit-reproducible for a given input.

use crate::real::Real;

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    gemm_nn(a, &bt, c, m, k, n);
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            let c_row = &mut c[i * n..(i + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_pi * b_pj;
            }
        }
    }
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Row-wise numerically stabilized softmax over contiguous rows of `width`.
pub fn softmax_rows<T: Real>(x: &mut [T], width: usize) {
    for row in x.chunks_mut(width) {
        let mut max = T::neg_infinity();
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_variants_agree_with_plain_product() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 * 0.5 - 1.0).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect(); // 3×4
        let mut c = vec![0.0; 8];
        gemm_nn(&a, &b, &mut c, 2, 3, 4);

        let bt = transpose(&b, 3, 4);
        let mut c_nt = vec![0.0; 8];
        gemm_nt(&a, &bt, &mut c_nt, 2, 3, 4);
        assert_eq!(c, c_nt);

        let at = transpose(&a, 2, 3);
        let mut c_tn = vec![0.0; 8];
        gemm_tn(&at, &b, &mut c_tn, 2, 3, 4);
        for (x, y) in c.iter().zip(&c_tn) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}
