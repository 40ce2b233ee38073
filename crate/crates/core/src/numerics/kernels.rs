//! Row-major dense kernels shared by the forward and backward passes.
//!
//! Every kernel accumulates into `out` (`out += ...`) so the backward pass can
//! reuse them for gradient accumulation.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// `out[m×q] += a[m×p] · b[p×q]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, p: usize, q: usize) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), p * q);
    debug_assert_eq!(out.len(), m * q);
    if q == 0 {
        return;
    }
    for (a_row, out_row) in a.chunks_exact(p.max(1)).zip(out.chunks_exact_mut(q)) {
        for (&a_ip, b_row) in a_row.iter().zip(b.chunks_exact(q)) {
            if a_ip == 0.0 {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×p] · b[n×p]ᵀ`
pub fn matmul_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, p: usize, n: usize) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), n * p);
    debug_assert_eq!(out.len(), m * n);
    if p == 0 || n == 0 {
        return;
    }
    for (a_row, out_row) in a.chunks_exact(p).zip(out.chunks_exact_mut(n)) {
        for (o, b_row) in out_row.iter_mut().zip(b.chunks_exact(p)) {
            *o += dot(a_row, b_row);
        }
    }
}

/// `out[p×q] += a[m×p]ᵀ · b[m×q]`
pub fn matmul_at_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, p: usize, q: usize) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), m * q);
    debug_assert_eq!(out.len(), p * q);
    if p == 0 || q == 0 {
        return;
    }
    for (a_row, b_row) in a.chunks_exact(p).zip(b.chunks_exact(q)) {
        for (&a_ri, out_row) in a_row.iter().zip(out.chunks_exact_mut(q)) {
            if a_ri == 0.0 {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ri * bv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators let the compiler vectorize the reduction.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// Standard normal PDF.
#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact GELU, `x·Φ(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// Derivative of exact GELU: `Φ(x) + x·φ(x)`.
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}
