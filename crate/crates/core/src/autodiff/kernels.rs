//! Dense slice kernels used by the graph ops. All accumulate into `out`.

use crate::scalar::Scalar;

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[m,n] += a[m,k] · b[k,n]`
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av != T::zero() {
                axpy(av, &b[p * n..(p + 1) * n], orow);
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn matmul_bt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            *o += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · b[m,n]`
pub fn matmul_at_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != T::zero() {
                axpy(av, brow, &mut out[p * n..(p + 1) * n]);
            }
        }
    }
}

/// Numerically stable in-place softmax; returns log-sum-exp.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = sum.recip();
    for v in row.iter_mut() {
        *v *= inv;
    }
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let (m, k, n) = (3, 5, 7);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut out = vec![0.0; m * n];
        matmul_acc(&a, &b, &mut out, m, k, n);
        assert!(out.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        let bt = transpose(&b, k, n);
        let mut out = vec![0.0; m * n];
        matmul_bt_acc(&a, &bt, &mut out, m, k, n);
        assert!(out.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        let at = transpose(&a, m, k);
        let mut out = vec![0.0; m * n];
        matmul_at_acc(&at, &b, &mut out, k, m, n);
        assert!(out.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut r = vec![1000.0f64, 1001.0, 999.0];
        let lse = softmax_in_place(&mut r);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(lse.is_finite());
    }
}
