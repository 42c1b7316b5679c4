//! Dense loops behind the tape ops. Fixed iteration order, so results are
//! bit-reproducible for a given shape.

use super::Scalar;

/// Dot product with eight independent accumulators, combined pairwise.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail = tail + *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `out += alpha * x`
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], out: &mut [T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = *o + alpha * v;
    }
}

/// `[m,k] x [k,n] -> [m,n]`
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            axpy(av, &b[p * n..(p + 1) * n], orow);
        }
    }
    out
}

/// `[m,n] x [k,n]^T -> [m,k]`
pub fn matmul_bt<T: Scalar>(g: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
    out
}

/// `[m,k]^T x [m,n] -> [k,n]`
pub fn matmul_at<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], grow, &mut out[p * n..(p + 1) * n]);
        }
    }
    out
}

/// Sum accumulated in 64-bit.
pub fn sum_f64<T: Scalar>(x: &[T]) -> f64 {
    x.iter().map(|v| v.as_f64()).sum()
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(sigmoid(x)) = -softplus(-x)`, stable for large |x|.
#[inline]
pub fn log_sigmoid<T: Scalar>(x: T) -> T {
    let neg = -x;
    let m = if neg > T::zero() { neg } else { T::zero() };
    -(m + (-x.abs()).exp().ln_1p())
}
