//! Forward kernels, generic over the scalar type.
//!
//! Every kernel is a plain loop nest over row-major buffers. The f32
//! instantiation is the execution path; the f64 instantiation re-evaluates a
//! recorded graph for finite-difference gradient checking, so the two paths
//! can never drift apart.

use alloc::vec;
use alloc::vec::Vec;

use crate::num::Real;

pub(crate) fn map<R: Real>(x: &[R], f: impl Fn(R) -> R) -> Vec<R> {
    x.iter().map(|&v| f(v)).collect()
}

pub(crate) fn zip<R: Real>(a: &[R], b: &[R], f: impl Fn(R, R) -> R) -> Vec<R> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn silu<R: Real>(x: R) -> R {
    x * sigmoid(x)
}

pub(crate) fn sigmoid<R: Real>(x: R) -> R {
    R::ONE / (R::ONE + (-x).exp())
}

/// `out[i*n+j] = sum_k a[i*k+p] * b[p*n+j]`
pub(crate) fn matmul<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    let mut out = vec![R::ZERO; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[i*k+p] = sum_j g[i*n+j] * b[p*n+j]` (g . b^T), used by matmul backward.
pub(crate) fn matmul_nt(g: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0f32;
            for (&gv, &bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            out[i * k + p] = s;
        }
    }
    out
}

/// `out[p*n+j] = sum_i a[i*k+p] * g[i*n+j]` (a^T . g), used by matmul backward.
pub(crate) fn matmul_tn(a: &[f32], g: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

pub(crate) fn transpose<R: Real>(x: &[R], rows: usize, cols: usize) -> Vec<R> {
    let mut out = vec![R::ZERO; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// Output extent of a convolution axis; `None` when the stride does not
/// divide evenly (rejected rather than floored).
pub(crate) fn conv_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = input + 2 * pad;
    if span < k {
        return None;
    }
    if (span - k) % stride != 0 {
        return None;
    }
    Some((span - k) / stride + 1)
}

/// Cross-correlation of `x [n,cin,h,w]` with `wgt [cout,cin,k,k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d<R: Real>(
    x: &[R],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    wgt: &[R],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<R> {
    let mut out = vec![R::ZERO; n * cout * oh * ow];
    for b in 0..n {
        for co in 0..cout {
            let obase = (b * cout + co) * oh * ow;
            for ci in 0..cin {
                let xbase = (b * cin + ci) * h * w;
                let wbase = (co * cin + ci) * k * k;
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = wgt[wbase + kh * k + kw];
                        for_valid_taps(h, w, k, stride, pad, kh, kw, oh, ow, |oi, lo, hi, ih| {
                            let orow = &mut out[obase + oi * ow + lo..obase + oi * ow + hi];
                            if stride == 1 {
                                let start = lo + kw - pad;
                                let xrow = &x[xbase + ih * w + start..xbase + ih * w + start + orow.len()];
                                for (o, &xv) in orow.iter_mut().zip(xrow) {
                                    *o += wv * xv;
                                }
                            } else {
                                for (j, o) in orow.iter_mut().enumerate() {
                                    let iw = (lo + j) * stride + kw - pad;
                                    *o += wv * x[xbase + ih * w + iw];
                                }
                            }
                        });
                    }
                }
            }
        }
    }
    out
}

/// Iterate the output rows/column-ranges whose input taps fall inside the
/// image for a fixed kernel offset `(kh, kw)`. Calls `f(oi, ow_lo, ow_hi_excl, ih)`.
#[allow(clippy::too_many_arguments)]
#[inline]
fn for_valid_taps(
    h: usize,
    w: usize,
    _k: usize,
    stride: usize,
    pad: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    // ih = oi*stride + kh - pad must lie in [0, h)
    if h + pad <= kh {
        return;
    }
    let oi_lo = if kh >= pad { 0 } else { (pad - kh).div_ceil(stride) };
    let oi_hi = ((h - 1 + pad - kh) / stride).min(oh.saturating_sub(1));
    // iw = oj*stride + kw - pad must lie in [0, w)
    if w + pad <= kw {
        return;
    }
    let oj_lo = if kw >= pad { 0 } else { (pad - kw).div_ceil(stride) };
    let oj_hi = ((w - 1 + pad - kw) / stride).min(ow.saturating_sub(1));
    if oi_lo > oi_hi || oj_lo > oj_hi {
        return;
    }
    for oi in oi_lo..=oi_hi {
        let ih = oi * stride + kh - pad;
        f(oi, oj_lo, oj_hi + 1, ih);
    }
}

/// Gradient wrt the convolution input.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward_input(
    gy: &[f32],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    wgt: &[f32],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let mut gx = vec![0.0f32; n * cin * h * w];
    for b in 0..n {
        for co in 0..cout {
            let obase = (b * cout + co) * oh * ow;
            for ci in 0..cin {
                let xbase = (b * cin + ci) * h * w;
                let wbase = (co * cin + ci) * k * k;
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = wgt[wbase + kh * k + kw];
                        for_valid_taps(h, w, k, stride, pad, kh, kw, oh, ow, |oi, lo, hi, ih| {
                            let grow = &gy[obase + oi * ow + lo..obase + oi * ow + hi];
                            if stride == 1 {
                                let start = lo + kw - pad;
                                let xrow = &mut gx[xbase + ih * w + start..xbase + ih * w + start + grow.len()];
                                for (o, &gv) in xrow.iter_mut().zip(grow) {
                                    *o += wv * gv;
                                }
                            } else {
                                for (j, &gv) in grow.iter().enumerate() {
                                    let iw = (lo + j) * stride + kw - pad;
                                    gx[xbase + ih * w + iw] += wv * gv;
                                }
                            }
                        });
                    }
                }
            }
        }
    }
    gx
}

/// Gradient wrt the convolution weights.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward_weight(
    gy: &[f32],
    x: &[f32],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let mut gw = vec![0.0f32; cout * cin * k * k];
    for b in 0..n {
        for co in 0..cout {
            let obase = (b * cout + co) * oh * ow;
            for ci in 0..cin {
                let xbase = (b * cin + ci) * h * w;
                let wbase = (co * cin + ci) * k * k;
                for kh in 0..k {
                    for kw in 0..k {
                        let mut s = 0.0f32;
                        for_valid_taps(h, w, k, stride, pad, kh, kw, oh, ow, |oi, lo, hi, ih| {
                            let grow = &gy[obase + oi * ow + lo..obase + oi * ow + hi];
                            if stride == 1 {
                                let start = lo + kw - pad;
                                let xrow = &x[xbase + ih * w + start..xbase + ih * w + start + grow.len()];
                                for (&gv, &xv) in grow.iter().zip(xrow) {
                                    s += gv * xv;
                                }
                            } else {
                                for (j, &gv) in grow.iter().enumerate() {
                                    let iw = (lo + j) * stride + kw - pad;
                                    s += gv * x[xbase + ih * w + iw];
                                }
                            }
                        });
                        gw[wbase + kh * k + kw] += s;
                    }
                }
            }
        }
    }
    gw
}

/// Row-wise softmax with max-subtraction stabilization.
pub(crate) fn softmax_rows<R: Real>(x: &[R], rows: usize, cols: usize) -> Vec<R> {
    let mut out = vec![R::ZERO; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut m = row[0];
        for &v in row {
            m = m.rmax(v);
        }
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut denom = 0.0f64;
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v - m).exp();
            *o = e;
            denom += e.to_f64();
        }
        let inv = R::from_f64(1.0 / denom);
        for o in orow.iter_mut() {
            *o = *o * inv;
        }
    }
    out
}

/// Group normalization over `[n, c, spatial]` with per-channel affine.
#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm<R: Real>(
    x: &[R],
    n: usize,
    c: usize,
    spatial: usize,
    groups: usize,
    gamma: &[R],
    beta: &[R],
    eps: R,
) -> Vec<R> {
    let cg = c / groups;
    let m = cg * spatial;
    let mut out = vec![R::ZERO; x.len()];
    for b in 0..n {
        for g in 0..groups {
            let start = (b * c + g * cg) * spatial;
            let slice = &x[start..start + m];
            let (mean, var) = mean_var(slice);
            let inv_std = R::ONE / (var + eps).sqrt();
            for lc in 0..cg {
                let ch = g * cg + lc;
                let ga = gamma[ch];
                let be = beta[ch];
                let base = start + lc * spatial;
                for s in 0..spatial {
                    out[base + s] = (x[base + s] - mean) * inv_std * ga + be;
                }
            }
        }
    }
    out
}

pub(crate) fn mean_var<R: Real>(x: &[R]) -> (R, R) {
    let mut sum = 0.0f64;
    for &v in x {
        sum += v.to_f64();
    }
    let mean = sum / x.len() as f64;
    let mut ss = 0.0f64;
    for &v in x {
        let d = v.to_f64() - mean;
        ss += d * d;
    }
    (R::from_f64(mean), R::from_f64(ss / x.len() as f64))
}

pub(crate) fn sum_all<R: Real>(x: &[R]) -> R {
    let mut s = 0.0f64;
    for &v in x {
        s += v.to_f64();
    }
    R::from_f64(s)
}
