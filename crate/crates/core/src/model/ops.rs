//! Flat row-major matrix/vector kernels shared by the forward and backward
//! passes. `w` is `[out_dim × in_dim]`, row-major.

use crate::math::sqrt;

pub(crate) const RMS_EPS: f64 = 1e-5;

/// out[o] = Σ_i w[o,i]·x[i]
#[inline]
pub(crate) fn matvec(w: &[f64], x: &[f64], out_dim: usize, in_dim: usize, out: &mut [f64]) {
    debug_assert_eq!(w.len(), out_dim * in_dim);
    for o in 0..out_dim {
        out[o] = crate::math::dot(&w[o * in_dim..(o + 1) * in_dim], x);
    }
}

/// dx[i] += Σ_o dy[o]·w[o,i]
#[inline]
pub(crate) fn matvec_t_add(w: &[f64], dy: &[f64], out_dim: usize, in_dim: usize, dx: &mut [f64]) {
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let d = dy[o];
        if d != 0.0 {
            for i in 0..in_dim {
                dx[i] += d * row[i];
            }
        }
    }
}

/// gw[o,i] += dy[o]·x[i]
#[inline]
pub(crate) fn outer_add(gw: &mut [f64], dy: &[f64], x: &[f64], out_dim: usize, in_dim: usize) {
    for o in 0..out_dim {
        let d = dy[o];
        if d != 0.0 {
            let row = &mut gw[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                row[i] += d * x[i];
            }
        }
    }
}

/// Inverse RMS of a vector.
#[inline]
pub(crate) fn rms_inv(x: &[f64]) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    1.0 / sqrt(ms + RMS_EPS)
}

/// Backward of y = x·ri with ri = 1/sqrt(mean(x²)+eps):
/// dx[j] += ri·dy[j] − ri³/n · (dy·x) · x[j]
#[inline]
pub(crate) fn rmsnorm_bwd_add(dy: &[f64], x: &[f64], ri: f64, dx: &mut [f64]) {
    let n = x.len() as f64;
    let proj = crate::math::dot(dy, x) * ri * ri * ri / n;
    for j in 0..x.len() {
        dx[j] += ri * dy[j] - proj * x[j];
    }
}

/// y += x
#[inline]
pub(crate) fn add_assign(y: &mut [f64], x: &[f64]) {
    for (a, b) in y.iter_mut().zip(x) {
        *a += b;
    }
}

/// SiLU x·σ(x) and its derivative σ(x)·(1 + x·(1−σ(x))).
#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x * crate::math::sigmoid(x)
}

#[inline]
pub(crate) fn silu_deriv(x: f64) -> f64 {
    let s = crate::math::sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Numerically stable in-place softmax.
#[inline]
pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = crate::math::exp(*v - mx);
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}
