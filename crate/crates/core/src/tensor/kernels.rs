//! Slice-level numeric kernels shared by the tensor type and the tape.
//!
//! All matrices are row-major. Reductions use a fixed accumulation order so
//! results are bit-reproducible.

use super::Scalar;

const LANES: usize = 8;

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    let s01 = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    let s23 = (acc[4] + acc[5]) + (acc[6] + acc[7]);
    s01 + s23 + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[n×m] = x[n×k] · w[m×k]ᵀ`
pub fn linear<T: Scalar>(x: &[T], w: &[T], n: usize, k: usize, m: usize, out: &mut [T]) {
    for (xi, oi) in x.chunks_exact(k).zip(out.chunks_exact_mut(m)) {
        for (wj, o) in w.chunks_exact(k).zip(oi.iter_mut()) {
            *o = dot(xi, wj);
        }
    }
    debug_assert_eq!(x.len(), n * k);
}

/// Backward of [`linear`] with respect to `x`: `dx[n×k] += dy[n×m] · w[m×k]`
pub fn linear_grad_input<T: Scalar>(dy: &[T], w: &[T], m: usize, k: usize, dx: &mut [T]) {
    for (dyi, dxi) in dy.chunks_exact(m).zip(dx.chunks_exact_mut(k)) {
        for (&g, wj) in dyi.iter().zip(w.chunks_exact(k)) {
            if g != T::zero() {
                axpy(g, wj, dxi);
            }
        }
    }
}

/// Backward of [`linear`] with respect to `w`: `dw[m×k] += dy[n×m]ᵀ · x[n×k]`
pub fn linear_grad_weight<T: Scalar>(dy: &[T], x: &[T], m: usize, k: usize, dw: &mut [T]) {
    for (dyi, xi) in dy.chunks_exact(m).zip(x.chunks_exact(k)) {
        for (&g, dwj) in dyi.iter().zip(dw.chunks_exact_mut(k)) {
            if g != T::zero() {
                axpy(g, xi, dwj);
            }
        }
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    out.iter_mut().for_each(|o| *o = T::zero());
    for (ai, oi) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&aip, bp) in ai.iter().zip(b.chunks_exact(n)) {
            axpy(aip, bp, oi);
        }
    }
    debug_assert_eq!(a.len(), m * k);
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize, out: &mut [T]) {
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
}

/// Max-subtracted log-softmax of one row.
pub fn log_softmax_row<T: Scalar>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = x.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

/// Softmax over the first `valid` entries of a row; the rest are zeroed.
pub fn masked_softmax_row<T: Scalar>(x: &[T], valid: usize, out: &mut [T]) {
    let max = x[..valid].iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &v) in out[..valid].iter_mut().zip(&x[..valid]) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in &mut out[..valid] {
        *o = *o / sum;
    }
    for o in &mut out[valid..] {
        *o = T::zero();
    }
}
