//! Forward kernels and their analytic backward passes.
//!
//! Each operation comes as a pure forward function plus a `*_vjp` computing
//! input (and parameter) gradients from the output gradient. Forward
//! functions report exact multiply-add counts into the caller's
//! [`FlopTrace`]; the vector-Jacobian products do not touch the trace.
//!
//! Matrices are `(1, m, 1, k)` tensors, batched token groups `(b, n, 1, d)`,
//! convolution kernels `(kh, kw, cin_per_group, cout)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{Real, Shape, Tensor};
use crate::trace::{FlopTrace, OpKind};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// element-wise
// ---------------------------------------------------------------------------

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>, trace: &mut FlopTrace) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "add",
            detail: format!("{} vs {}", a.shape(), b.shape()),
        });
    }
    trace.add(OpKind::Other, a.data().len() as u64);
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect();
    Tensor::new(a.shape(), data)
}

pub fn scale<T: Real>(x: &Tensor<T>, k: T, trace: &mut FlopTrace) -> Tensor<T> {
    trace.add(OpKind::Other, x.data().len() as u64);
    Tensor::new(x.shape(), x.data().iter().map(|v| *v * k).collect()).unwrap()
}

/// GELU in its exact erf form: `x * Phi(x)`.
pub fn gelu<T: Real>(x: &Tensor<T>, trace: &mut FlopTrace) -> Tensor<T> {
    trace.add(OpKind::Activation, x.data().len() as u64);
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(core::f64::consts::FRAC_1_SQRT_2);
    let data = x
        .data()
        .iter()
        .map(|&v| half * v * (T::one() + (v * inv_sqrt2).erf()))
        .collect();
    Tensor::new(x.shape(), data).unwrap()
}

pub fn gelu_vjp<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(core::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::from_f64(1.0 / libm::sqrt(2.0 * core::f64::consts::PI));
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let cdf = half * (T::one() + (v * inv_sqrt2).erf());
            let pdf = inv_sqrt_2pi * (-half * v * v).exp();
            g * (cdf + v * pdf)
        })
        .collect();
    Tensor::new(x.shape(), data).unwrap()
}

// ---------------------------------------------------------------------------
// batched matrix products
// ---------------------------------------------------------------------------

/// `y[b] = a[b] * rhs[b]` with `a: (B, m, 1, k)`, `rhs: (B, k, 1, n)`.
pub fn bmm_nn<T: Real>(a: &Tensor<T>, rhs: &Tensor<T>, trace: &mut FlopTrace) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), rhs.shape());
    if sa.w != 1 || sb.w != 1 || sa.b != sb.b || sa.c != sb.h {
        return Err(Error::ShapeMismatch {
            op: "bmm_nn",
            detail: format!("{sa} x {sb}"),
        });
    }
    let (bt, m, k, n) = (sa.b, sa.h, sa.c, sb.c);
    trace.add(OpKind::MatMul, (bt * m * n * k) as u64);
    let mut out = Tensor::zeros(Shape::new(bt, m, 1, n));
    for bi in 0..bt {
        for i in 0..m {
            for kk in 0..k {
                let av = a.at(bi, i, 0, kk);
                for j in 0..n {
                    let cur = out.at(bi, i, 0, j);
                    out.set(bi, i, 0, j, cur + av * rhs.at(bi, kk, 0, j));
                }
            }
        }
    }
    Ok(out)
}

pub fn bmm_nn_vjp<T: Real>(
    a: &Tensor<T>,
    rhs: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (sa, sb) = (a.shape(), rhs.shape());
    let (bt, m, k, n) = (sa.b, sa.h, sa.c, sb.c);
    let mut da = Tensor::zeros(sa);
    let mut db = Tensor::zeros(sb);
    for bi in 0..bt {
        for i in 0..m {
            for j in 0..n {
                let g = dy.at(bi, i, 0, j);
                for kk in 0..k {
                    let cur = da.at(bi, i, 0, kk);
                    da.set(bi, i, 0, kk, cur + g * rhs.at(bi, kk, 0, j));
                    let cur = db.at(bi, kk, 0, j);
                    db.set(bi, kk, 0, j, cur + g * a.at(bi, i, 0, kk));
                }
            }
        }
    }
    (da, db)
}

/// `y[b] = a[b] * rhs[b]^T` with `a: (B, m, 1, k)`, `rhs: (B, n, 1, k)`.
pub fn bmm_nt<T: Real>(a: &Tensor<T>, rhs: &Tensor<T>, trace: &mut FlopTrace) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), rhs.shape());
    if sa.w != 1 || sb.w != 1 || sa.b != sb.b || sa.c != sb.c {
        return Err(Error::ShapeMismatch {
            op: "bmm_nt",
            detail: format!("{sa} x {sb}^T"),
        });
    }
    let (bt, m, k, n) = (sa.b, sa.h, sa.c, sb.h);
    trace.add(OpKind::MatMul, (bt * m * n * k) as u64);
    let mut out = Tensor::zeros(Shape::new(bt, m, 1, n));
    for bi in 0..bt {
        for i in 0..m {
            for j in 0..n {
                let mut acc = T::zero();
                for kk in 0..k {
                    acc = acc + a.at(bi, i, 0, kk) * rhs.at(bi, j, 0, kk);
                }
                out.set(bi, i, 0, j, acc);
            }
        }
    }
    Ok(out)
}

pub fn bmm_nt_vjp<T: Real>(
    a: &Tensor<T>,
    rhs: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (sa, sb) = (a.shape(), rhs.shape());
    let (bt, m, k, n) = (sa.b, sa.h, sa.c, sb.h);
    let mut da = Tensor::zeros(sa);
    let mut db = Tensor::zeros(sb);
    for bi in 0..bt {
        for i in 0..m {
            for j in 0..n {
                let g = dy.at(bi, i, 0, j);
                for kk in 0..k {
                    let cur = da.at(bi, i, 0, kk);
                    da.set(bi, i, 0, kk, cur + g * rhs.at(bi, j, 0, kk));
                    let cur = db.at(bi, j, 0, kk);
                    db.set(bi, j, 0, kk, cur + g * a.at(bi, i, 0, kk));
                }
            }
        }
    }
    (da, db)
}

/// Plain `m x k` by `k x n` product; matrices are `(1, rows, 1, cols)`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>, trace: &mut FlopTrace) -> Result<Tensor<T>> {
    if a.shape().b != 1 || b.shape().b != 1 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            detail: format!("expected unbatched matrices, got {} x {}", a.shape(), b.shape()),
        });
    }
    bmm_nn(a, b, trace)
}

// ---------------------------------------------------------------------------
// softmax over the channel axis
// ---------------------------------------------------------------------------

/// Numerically-stabilized softmax over the last (channel) axis.
///
/// When `mask` is given (one flag per channel position), invalid positions
/// get weight exactly zero: they are excluded from the max and the sum, not
/// pushed to `-inf`. A row with no valid position is rejected.
pub fn softmax_lastdim<T: Real>(
    x: &Tensor<T>,
    mask: Option<&[bool]>,
    trace: &mut FlopTrace,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.c == 0 {
        return Err(Error::InvalidArgument {
            op: "softmax_lastdim",
            detail: "zero-length last dimension".into(),
        });
    }
    if let Some(m) = mask {
        if m.len() != s.c {
            return Err(Error::ShapeMismatch {
                op: "softmax_lastdim",
                detail: format!("mask length {} vs last dim {}", m.len(), s.c),
            });
        }
        if !m.iter().any(|&v| v) {
            return Err(Error::FullyMasked { op: "softmax_lastdim" });
        }
    }
    trace.add(OpKind::Softmax, s.len() as u64);
    let valid = |j: usize| mask.map_or(true, |m| m[j]);
    let rows = s.len() / s.c;
    let mut out = vec![T::zero(); s.len()];
    for r in 0..rows {
        let base = r * s.c;
        let row = &x.data()[base..base + s.c];
        let mut max = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if valid(j) && v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for (j, &v) in row.iter().enumerate() {
            if valid(j) {
                let e = (v - max).exp();
                out[base + j] = e;
                sum = sum + e;
            }
        }
        for j in 0..s.c {
            if valid(j) {
                out[base + j] = out[base + j] / sum;
            }
        }
    }
    Tensor::new(s, out)
}

/// Backward through softmax: `dx = y .* (dy - sum(dy .* y))` per row;
/// masked positions receive zero gradient.
pub fn softmax_lastdim_vjp<T: Real>(
    y: &Tensor<T>,
    dy: &Tensor<T>,
    mask: Option<&[bool]>,
) -> Tensor<T> {
    let s = y.shape();
    let valid = |j: usize| mask.map_or(true, |m| m[j]);
    let rows = s.len() / s.c;
    let mut dx = vec![T::zero(); s.len()];
    for r in 0..rows {
        let base = r * s.c;
        let mut dot = T::zero();
        for j in 0..s.c {
            dot = dot + dy.data()[base + j] * y.data()[base + j];
        }
        for j in 0..s.c {
            if valid(j) {
                dx[base + j] = y.data()[base + j] * (dy.data()[base + j] - dot);
            }
        }
    }
    Tensor::new(s, dx).unwrap()
}

// ---------------------------------------------------------------------------
// layer normalization over the channel axis
// ---------------------------------------------------------------------------

/// Per-token layer norm over channels with affine `gamma`, `beta` of shape
/// `(1, 1, 1, c)`.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
    trace: &mut FlopTrace,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.c == 0 {
        return Err(Error::InvalidArgument {
            op: "layer_norm",
            detail: "zero channels".into(),
        });
    }
    if gamma.shape().c != s.c || beta.shape().c != s.c {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            detail: format!("affine length {} vs channels {}", gamma.shape().c, s.c),
        });
    }
    trace.add(OpKind::Norm, s.len() as u64);
    let inv_c = T::one() / T::from_f64(s.c as f64);
    let tokens = s.len() / s.c;
    let mut out = vec![T::zero(); s.len()];
    for t in 0..tokens {
        let base = t * s.c;
        let row = &x.data()[base..base + s.c];
        let mut mean = T::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean * inv_c;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var = var + d * d;
        }
        var = var * inv_c;
        let inv_std = T::one() / (var + eps).sqrt();
        for j in 0..s.c {
            let xhat = (row[j] - mean) * inv_std;
            out[base + j] = gamma.data()[j] * xhat + beta.data()[j];
        }
    }
    Tensor::new(s, out)
}

/// Gradients for layer norm: returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_vjp<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    eps: T,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let inv_c = T::one() / T::from_f64(s.c as f64);
    let tokens = s.len() / s.c;
    let mut dx = vec![T::zero(); s.len()];
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for t in 0..tokens {
        let base = t * s.c;
        let row = &x.data()[base..base + s.c];
        let grow = &dy.data()[base..base + s.c];
        let mut mean = T::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean * inv_c;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var = var + d * d;
        }
        var = var * inv_c;
        let inv_std = T::one() / (var + eps).sqrt();

        let mut mean_dxh = T::zero();
        let mut mean_dxh_xhat = T::zero();
        for j in 0..s.c {
            let xhat = (row[j] - mean) * inv_std;
            let dxh = grow[j] * gamma.data()[j];
            mean_dxh = mean_dxh + dxh;
            mean_dxh_xhat = mean_dxh_xhat + dxh * xhat;
            dgamma[j] = dgamma[j] + grow[j] * xhat;
            dbeta[j] = dbeta[j] + grow[j];
        }
        mean_dxh = mean_dxh * inv_c;
        mean_dxh_xhat = mean_dxh_xhat * inv_c;
        for j in 0..s.c {
            let xhat = (row[j] - mean) * inv_std;
            let dxh = grow[j] * gamma.data()[j];
            dx[base + j] = (dxh - mean_dxh - xhat * mean_dxh_xhat) * inv_std;
        }
    }
    (
        Tensor::new(s, dx).unwrap(),
        Tensor::vector(dgamma),
        Tensor::vector(dbeta),
    )
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

fn conv_out_extent(ext: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = ext + 2 * pad;
    if k == 0 || stride == 0 || padded < k {
        return Err(Error::InvalidArgument {
            op: "conv2d",
            detail: format!("kernel {k} larger than padded extent {padded} (or zero stride)"),
        });
    }
    Ok((padded - k) / stride + 1)
}

/// Grouped 2D convolution. Kernel layout `(kh, kw, cin_per_group, cout)`,
/// zero padding, optional bias of shape `(1, 1, 1, cout)`.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: (usize, usize),
    pad: (usize, usize),
    groups: usize,
    trace: &mut FlopTrace,
) -> Result<Tensor<T>> {
    let s = x.shape();
    let ws = weight.shape();
    let (kh, kw, cin_pg, cout) = (ws.b, ws.h, ws.w, ws.c);
    if groups == 0 || s.c % groups != 0 || cout % groups != 0 {
        return Err(Error::InvalidArgument {
            op: "conv2d",
            detail: format!("channels {} / cout {cout} not divisible by groups {groups}", s.c),
        });
    }
    if cin_pg != s.c / groups {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            detail: format!("kernel expects {cin_pg} channels per group, input has {}", s.c / groups),
        });
    }
    if let Some(b) = bias {
        if b.shape().c != cout {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias length {} vs cout {cout}", b.shape().c),
            });
        }
    }
    let oh = conv_out_extent(s.h, kh, stride.0, pad.0)?;
    let ow = conv_out_extent(s.w, kw, stride.1, pad.1)?;
    let cout_pg = cout / groups;
    trace.add(OpKind::Conv, (s.b * oh * ow * kh * kw * cin_pg * cout) as u64);

    let mut out = Tensor::zeros(Shape::new(s.b, oh, ow, cout));
    for b in 0..s.b {
        for oy in 0..oh {
            for ox in 0..ow {
                for g in 0..groups {
                    for co_g in 0..cout_pg {
                        let co = g * cout_pg + co_g;
                        let mut acc = bias.map_or(T::zero(), |bb| bb.data()[co]);
                        for ky in 0..kh {
                            let iy = (oy * stride.0 + ky) as isize - pad.0 as isize;
                            if iy < 0 || iy >= s.h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride.1 + kx) as isize - pad.1 as isize;
                                if ix < 0 || ix >= s.w as isize {
                                    continue;
                                }
                                for ci_g in 0..cin_pg {
                                    let ci = g * cin_pg + ci_g;
                                    acc = acc
                                        + x.at(b, iy as usize, ix as usize, ci)
                                            * weight.at(ky, kx, ci_g, co);
                                }
                            }
                        }
                        out.set(b, oy, ox, co, acc);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients for `conv2d`: returns `(dx, dweight, dbias)`.
pub fn conv2d_vjp<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: (usize, usize),
    pad: (usize, usize),
    groups: usize,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let ws = weight.shape();
    let (kh, kw, cin_pg, cout) = (ws.b, ws.h, ws.w, ws.c);
    let cout_pg = cout / groups;
    let dys = dy.shape();
    let mut dx = Tensor::zeros(s);
    let mut dw = Tensor::zeros(ws);
    let mut db = vec![T::zero(); cout];
    for b in 0..s.b {
        for oy in 0..dys.h {
            for ox in 0..dys.w {
                for g in 0..groups {
                    for co_g in 0..cout_pg {
                        let co = g * cout_pg + co_g;
                        let gout = dy.at(b, oy, ox, co);
                        db[co] = db[co] + gout;
                        for ky in 0..kh {
                            let iy = (oy * stride.0 + ky) as isize - pad.0 as isize;
                            if iy < 0 || iy >= s.h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride.1 + kx) as isize - pad.1 as isize;
                                if ix < 0 || ix >= s.w as isize {
                                    continue;
                                }
                                for ci_g in 0..cin_pg {
                                    let ci = g * cin_pg + ci_g;
                                    let xi = x.at(b, iy as usize, ix as usize, ci);
                                    let wv = weight.at(ky, kx, ci_g, co);
                                    let cur = dx.at(b, iy as usize, ix as usize, ci);
                                    dx.set(b, iy as usize, ix as usize, ci, cur + gout * wv);
                                    let cur = dw.at(ky, kx, ci_g, co);
                                    dw.set(ky, kx, ci_g, co, cur + gout * xi);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, Tensor::vector(db))
}

// ---------------------------------------------------------------------------
// pooling, channel bookkeeping, spatial padding
// ---------------------------------------------------------------------------

/// Global average over the spatial extents: `(b, h, w, c) -> (b, 1, 1, c)`.
pub fn mean_pool_spatial<T: Real>(x: &Tensor<T>, trace: &mut FlopTrace) -> Tensor<T> {
    let s = x.shape();
    trace.add(OpKind::Other, s.len() as u64);
    let inv = T::one() / T::from_f64((s.h * s.w) as f64);
    let mut out = Tensor::zeros(Shape::new(s.b, 1, 1, s.c));
    for b in 0..s.b {
        for y in 0..s.h {
            for x_ in 0..s.w {
                for ch in 0..s.c {
                    let cur = out.at(b, 0, 0, ch);
                    out.set(b, 0, 0, ch, cur + x.at(b, y, x_, ch) * inv);
                }
            }
        }
    }
    out
}

pub fn mean_pool_spatial_vjp<T: Real>(x_shape: Shape, dy: &Tensor<T>) -> Tensor<T> {
    let inv = T::one() / T::from_f64((x_shape.h * x_shape.w) as f64);
    Tensor::from_fn(x_shape, |b, _, _, ch| dy.at(b, 0, 0, ch) * inv)
}

/// Concatenate along channels; all parts must agree on `(b, h, w)`.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::InvalidArgument {
        op: "concat_channels",
        detail: "no parts".into(),
    })?;
    let s0 = first.shape();
    let total_c: usize = parts.iter().map(|p| p.shape().c).sum();
    for p in parts {
        let s = p.shape();
        if (s.b, s.h, s.w) != (s0.b, s0.h, s0.w) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                detail: format!("{s} vs {s0}"),
            });
        }
    }
    let mut out = Tensor::zeros(Shape::new(s0.b, s0.h, s0.w, total_c));
    for b in 0..s0.b {
        for y in 0..s0.h {
            for x in 0..s0.w {
                let mut off = 0;
                for p in parts {
                    for ch in 0..p.shape().c {
                        out.set(b, y, x, off + ch, p.at(b, y, x, ch));
                    }
                    off += p.shape().c;
                }
            }
        }
    }
    Ok(out)
}

/// Copy out channels `[start, start+len)`.
pub fn slice_channels<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if start + len > s.c {
        return Err(Error::InvalidArgument {
            op: "slice_channels",
            detail: format!("range {start}..{} out of {} channels", start + len, s.c),
        });
    }
    Ok(Tensor::from_fn(Shape::new(s.b, s.h, s.w, len), |b, y, x_, ch| {
        x.at(b, y, x_, start + ch)
    }))
}

/// Split into two equal channel halves; odd channel counts are rejected.
pub fn split_channels<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let c = x.shape().c;
    if c % 2 != 0 {
        return Err(Error::InvalidArgument {
            op: "split_channels",
            detail: format!("odd channel count {c}"),
        });
    }
    Ok((slice_channels(x, 0, c / 2)?, slice_channels(x, c / 2, c / 2)?))
}

/// Zero-pad on the bottom/right to `(hp, wp)`.
pub fn pad_spatial<T: Real>(x: &Tensor<T>, hp: usize, wp: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if hp < s.h || wp < s.w {
        return Err(Error::InvalidArgument {
            op: "pad_spatial",
            detail: format!("target {hp}x{wp} smaller than {}x{}", s.h, s.w),
        });
    }
    let mut out = Tensor::zeros(Shape::new(s.b, hp, wp, s.c));
    for b in 0..s.b {
        for y in 0..s.h {
            for x_ in 0..s.w {
                for ch in 0..s.c {
                    out.set(b, y, x_, ch, x.at(b, y, x_, ch));
                }
            }
        }
    }
    Ok(out)
}

/// Keep the top-left `(h, w)` region.
pub fn crop_spatial<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if h > s.h || w > s.w {
        return Err(Error::InvalidArgument {
            op: "crop_spatial",
            detail: format!("crop {h}x{w} larger than {}x{}", s.h, s.w),
        });
    }
    Ok(Tensor::from_fn(Shape::new(s.b, h, w, s.c), |b, y, x_, ch| {
        x.at(b, y, x_, ch)
    }))
}

// ---------------------------------------------------------------------------
// token gather / scatter
// ---------------------------------------------------------------------------

/// Gather the listed `(row, col)` coordinates into a `(b, n, 1, c)` group.
pub fn gather_tokens<T: Real>(x: &Tensor<T>, coords: &[(usize, usize)]) -> Result<Tensor<T>> {
    let s = x.shape();
    for &(y, x_) in coords {
        if y >= s.h || x_ >= s.w {
            return Err(Error::InvalidArgument {
                op: "gather_tokens",
                detail: format!("coordinate ({y}, {x_}) outside {}x{}", s.h, s.w),
            });
        }
    }
    let mut out = Tensor::zeros(Shape::new(s.b, coords.len(), 1, s.c));
    for b in 0..s.b {
        for (t, &(y, x_)) in coords.iter().enumerate() {
            for ch in 0..s.c {
                out.set(b, t, 0, ch, x.at(b, y, x_, ch));
            }
        }
    }
    Ok(out)
}

pub fn gather_tokens_vjp<T: Real>(
    x_shape: Shape,
    coords: &[(usize, usize)],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape);
    for b in 0..x_shape.b {
        for (t, &(y, x_)) in coords.iter().enumerate() {
            for ch in 0..x_shape.c {
                let cur = dx.at(b, y, x_, ch);
                dx.set(b, y, x_, ch, cur + dy.at(b, t, 0, ch));
            }
        }
    }
    dx
}

/// Copy out token rows `[start, start+len)` of a `(b, n, 1, c)` group.
pub fn slice_tokens<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.w != 1 || start + len > s.h {
        return Err(Error::InvalidArgument {
            op: "slice_tokens",
            detail: format!("rows {start}..{} out of {} tokens", start + len, s.h),
        });
    }
    Ok(Tensor::from_fn(Shape::new(s.b, len, 1, s.c), |b, t, _, ch| {
        x.at(b, start + t, 0, ch)
    }))
}

pub fn slice_tokens_vjp<T: Real>(x_shape: Shape, start: usize, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape);
    for b in 0..dy.shape().b {
        for t in 0..dy.shape().h {
            for ch in 0..x_shape.c {
                dx.set(b, start + t, 0, ch, dy.at(b, t, 0, ch));
            }
        }
    }
    dx
}

/// Write token groups back onto an `(b, h, w, c)` map. Together the groups'
/// coordinates must cover every position at most once; uncovered positions
/// stay zero.
pub fn scatter_tokens<T: Real>(
    groups: &[&Tensor<T>],
    coords: &[Vec<(usize, usize)>],
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let first = groups.first().ok_or_else(|| Error::InvalidArgument {
        op: "scatter_tokens",
        detail: "no groups".into(),
    })?;
    let (b, c) = (first.shape().b, first.shape().c);
    let mut seen = vec![false; h * w];
    let mut out = Tensor::zeros(Shape::new(b, h, w, c));
    for (g, part) in groups.iter().enumerate() {
        let cs = &coords[g];
        if part.shape().h != cs.len() || part.shape().b != b || part.shape().c != c {
            return Err(Error::ShapeMismatch {
                op: "scatter_tokens",
                detail: format!("group {g}: {} tokens vs {} coords", part.shape().h, cs.len()),
            });
        }
        for (t, &(y, x_)) in cs.iter().enumerate() {
            if y >= h || x_ >= w {
                return Err(Error::InvalidArgument {
                    op: "scatter_tokens",
                    detail: format!("coordinate ({y}, {x_}) outside {h}x{w}"),
                });
            }
            if seen[y * w + x_] {
                return Err(Error::InvalidArgument {
                    op: "scatter_tokens",
                    detail: format!("coordinate ({y}, {x_}) written twice"),
                });
            }
            seen[y * w + x_] = true;
            for bi in 0..b {
                for ch in 0..c {
                    out.set(bi, y, x_, ch, part.at(bi, t, 0, ch));
                }
            }
        }
    }
    Ok(out)
}

pub fn scatter_tokens_vjp<T: Real>(
    coords: &[Vec<(usize, usize)>],
    dy: &Tensor<T>,
) -> Vec<Tensor<T>> {
    coords
        .iter()
        .map(|cs| gather_tokens(dy, cs).expect("scatter coords were validated on the forward pass"))
        .collect()
}

// ---------------------------------------------------------------------------
// classification loss
// ---------------------------------------------------------------------------

/// Mean softmax cross-entropy over the batch. Logits are `(b, 1, 1, k)`.
pub fn cross_entropy_mean<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
    trace: &mut FlopTrace,
) -> Result<Tensor<T>> {
    let s = logits.shape();
    if s.h != 1 || s.w != 1 || labels.len() != s.b {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy_mean",
            detail: format!("logits {s} with {} labels", labels.len()),
        });
    }
    for &l in labels {
        if l >= s.c {
            return Err(Error::InvalidArgument {
                op: "cross_entropy_mean",
                detail: format!("label {l} out of {} classes", s.c),
            });
        }
    }
    trace.add(OpKind::Other, s.len() as u64);
    let mut total = T::zero();
    for b in 0..s.b {
        let mut max = T::neg_infinity();
        for j in 0..s.c {
            max = max.max(logits.at(b, 0, 0, j));
        }
        let mut sum = T::zero();
        for j in 0..s.c {
            sum = sum + (logits.at(b, 0, 0, j) - max).exp();
        }
        total = total + (max + sum.ln() - logits.at(b, 0, 0, labels[b]));
    }
    Ok(Tensor::scalar(total / T::from_f64(s.b as f64)))
}

pub fn cross_entropy_mean_vjp<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
    dloss: T,
) -> Tensor<T> {
    let s = logits.shape();
    let inv_b = T::one() / T::from_f64(s.b as f64);
    let mut dx = Tensor::zeros(s);
    for b in 0..s.b {
        let mut max = T::neg_infinity();
        for j in 0..s.c {
            max = max.max(logits.at(b, 0, 0, j));
        }
        let mut sum = T::zero();
        for j in 0..s.c {
            sum = sum + (logits.at(b, 0, 0, j) - max).exp();
        }
        for j in 0..s.c {
            let p = (logits.at(b, 0, 0, j) - max).exp() / sum;
            let delta = if j == labels[b] { T::one() } else { T::zero() };
            dx.set(b, 0, 0, j, (p - delta) * inv_b * dloss);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use alloc::vec;

    fn trace() -> FlopTrace {
        FlopTrace::new("test")
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::<f32>::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::<f32>::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = matmul(&a, &b, &mut trace()).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::<f32>::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f32>::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        let y = matmul(&a, &b, &mut trace()).unwrap();
        assert_eq!(y.data(), &[11.0]);
    }

    #[test]
    fn matmul_trace_counts_mnk() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 2, 1, 4));
        let b = Tensor::<f32>::zeros(Shape::new(1, 4, 1, 3));
        let mut t = trace();
        matmul(&a, &b, &mut t).unwrap();
        assert_eq!(t.matmul, 24); // m*n*k = 2*3*4
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 2, 1, 3));
        let b = Tensor::<f32>::zeros(Shape::new(1, 4, 1, 3));
        assert!(matmul(&a, &b, &mut trace()).is_err());
    }

    #[test]
    fn softmax_symmetry_and_closed_form() {
        let x = Tensor::<f64>::vector(vec![0.0, 0.0]);
        let y = softmax_lastdim(&x, None, &mut trace()).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-12);

        let x = Tensor::<f64>::vector(vec![(2.0f64).ln(), 0.0]);
        let y = softmax_lastdim(&x, None, &mut trace()).unwrap();
        assert!((y.data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((y.data()[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let x = Tensor::<f32>::vector(vec![1000.0, 0.0]);
        let y = softmax_lastdim(&x, None, &mut trace()).unwrap();
        assert!(y.is_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-6);
        assert!(y.data()[1].abs() < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one_under_random_inputs() {
        let mut rng = Rng::new(11);
        for _ in 0..50 {
            let s = Shape::new(
                1 + rng.next_usize(3),
                1 + rng.next_usize(4),
                1,
                1 + rng.next_usize(9),
            );
            let x = Tensor::<f32>::from_fn(s, |_, _, _, _| rng.uniform(-30.0, 30.0) as f32);
            let y = softmax_lastdim(&x, None, &mut trace()).unwrap();
            assert!(y.is_finite());
            for row in y.data().chunks(s.c) {
                let sum: f32 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
            }
        }
    }

    #[test]
    fn softmax_masked_positions_are_exactly_zero() {
        let x = Tensor::<f32>::vector(vec![5.0, 100.0, -3.0]);
        let mask = [true, false, true];
        let y = softmax_lastdim(&x, Some(&mask), &mut trace()).unwrap();
        assert_eq!(y.data()[1], 0.0);
        assert!((y.data()[0] + y.data()[2] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_rejects_fully_masked() {
        let x = Tensor::<f32>::vector(vec![1.0, 2.0]);
        let r = softmax_lastdim(&x, Some(&[false, false]), &mut trace());
        assert!(matches!(r, Err(Error::FullyMasked { .. })));
    }

    #[test]
    fn layer_norm_two_point() {
        let x = Tensor::<f64>::vector(vec![1.0, 3.0]);
        let gamma = Tensor::vector(vec![1.0, 1.0]);
        let beta = Tensor::vector(vec![0.0, 0.0]);
        let y = layer_norm(&x, &gamma, &beta, 0.0, &mut trace()).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-12);
        assert!((y.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_input_yields_beta() {
        let x = Tensor::<f32>::filled(Shape::new(1, 2, 2, 3), 4.0);
        let gamma = Tensor::vector(vec![1.0; 3]);
        let beta = Tensor::vector(vec![0.5; 3]);
        let y = layer_norm(&x, &gamma, &beta, 1e-5, &mut trace()).unwrap();
        for &v in y.data() {
            assert!((v - 0.5).abs() < 1e-5);
        }
    }

    #[test]
    fn layer_norm_zero_gamma_yields_beta() {
        let mut rng = Rng::new(2);
        let x = Tensor::<f32>::from_fn(Shape::new(1, 3, 3, 4), |_, _, _, _| {
            rng.uniform(-1.0, 1.0) as f32
        });
        let gamma = Tensor::vector(vec![0.0; 4]);
        let beta = Tensor::vector(vec![-1.25; 4]);
        let y = layer_norm(&x, &gamma, &beta, 1e-5, &mut trace()).unwrap();
        for &v in y.data() {
            assert_eq!(v, -1.25);
        }
    }

    #[test]
    fn conv2d_identity_pointwise() {
        let mut rng = Rng::new(3);
        let x = Tensor::<f32>::from_fn(Shape::new(1, 4, 5, 3), |_, _, _, _| {
            rng.uniform(-1.0, 1.0) as f32
        });
        // 1x1 identity kernel
        let w = Tensor::from_fn(Shape::new(1, 1, 3, 3), |_, _, ci, co| {
            if ci == co {
                1.0
            } else {
                0.0
            }
        });
        let y = conv2d(&x, &w, None, (1, 1), (0, 0), 1, &mut trace()).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_depthwise_center_one_is_identity() {
        let mut rng = Rng::new(4);
        let x = Tensor::<f32>::from_fn(Shape::new(2, 5, 4, 6), |_, _, _, _| {
            rng.uniform(-1.0, 1.0) as f32
        });
        let w = Tensor::from_fn(Shape::new(3, 3, 1, 6), |ky, kx, _, _| {
            if ky == 1 && kx == 1 {
                1.0
            } else {
                0.0
            }
        });
        let y = conv2d(&x, &w, None, (1, 1), (1, 1), 6, &mut trace()).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_stage_one_geometry() {
        // 224x224x3, k=7, stride 4, pad 3 -> 56x56
        let x = Tensor::<f32>::zeros(Shape::new(1, 224, 224, 3));
        let w = Tensor::zeros(Shape::new(7, 7, 3, 8));
        let y = conv2d(&x, &w, None, (4, 4), (3, 3), 1, &mut trace()).unwrap();
        assert_eq!((y.shape().h, y.shape().w), (56, 56));
    }

    #[test]
    fn conv2d_trace_matches_closed_form() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 8, 8, 4));
        let w = Tensor::zeros(Shape::new(3, 3, 4, 10));
        let mut t = trace();
        conv2d(&x, &w, None, (1, 1), (1, 1), 1, &mut t).unwrap();
        assert_eq!(t.conv, (8 * 8 * 3 * 3 * 4 * 10) as u64);
    }

    #[test]
    fn conv2d_rejects_oversized_kernel() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 2, 1));
        let w = Tensor::zeros(Shape::new(5, 5, 1, 1));
        assert!(conv2d(&x, &w, None, (1, 1), (1, 1), 1, &mut trace()).is_err());
    }

    #[test]
    fn gelu_zero_is_zero() {
        let x = Tensor::<f64>::vector(vec![0.0, 1.0, -1.0]);
        let y = gelu(&x, &mut trace());
        assert_eq!(y.data()[0], 0.0);
        // gelu(1) = 0.5 * (1 + erf(1/sqrt(2))) = Phi(1)
        assert!((y.data()[1] - 0.841_344_746_068_543).abs() < 1e-12);
    }

    #[test]
    fn mean_pool_of_constant_field() {
        let x = Tensor::<f32>::filled(Shape::new(2, 3, 5, 4), 2.5);
        let y = mean_pool_spatial(&x, &mut trace());
        assert_eq!(y.shape(), Shape::new(2, 1, 1, 4));
        for &v in y.data() {
            assert!((v - 2.5).abs() < 1e-6);
        }
    }

    #[test]
    fn split_then_concat_is_identity() {
        let mut rng = Rng::new(5);
        let x = Tensor::<f32>::from_fn(Shape::new(2, 3, 3, 64), |_, _, _, _| {
            rng.uniform(-2.0, 2.0) as f32
        });
        let (a, b) = split_channels(&x).unwrap();
        assert_eq!(a.shape().c, 32);
        assert_eq!(b.shape().c, 32);
        let back = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn split_rejects_odd_channels() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 1, 5));
        assert!(split_channels(&x).is_err());
    }

    #[test]
    fn pad_then_crop_roundtrip() {
        let mut rng = Rng::new(6);
        let x = Tensor::<f32>::from_fn(Shape::new(1, 5, 7, 3), |_, _, _, _| {
            rng.uniform(-1.0, 1.0) as f32
        });
        let padded = pad_spatial(&x, 8, 9).unwrap();
        let back = crop_spatial(&padded, 5, 7).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn gather_scatter_roundtrip() {
        let mut rng = Rng::new(7);
        let x = Tensor::<f32>::from_fn(Shape::new(2, 4, 4, 3), |_, _, _, _| {
            rng.uniform(-1.0, 1.0) as f32
        });
        // two interlaced row groups
        let g0: Vec<(usize, usize)> = [0usize, 2].iter().flat_map(|&r| (0..4).map(move |c| (r, c))).collect();
        let g1: Vec<(usize, usize)> = [1usize, 3].iter().flat_map(|&r| (0..4).map(move |c| (r, c))).collect();
        let t0 = gather_tokens(&x, &g0).unwrap();
        let t1 = gather_tokens(&x, &g1).unwrap();
        let back = scatter_tokens(&[&t0, &t1], &[g0, g1], 4, 4).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 2, 1));
        assert!(gather_tokens(&x, &[(2, 0)]).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::<f64>::new(Shape::new(2, 1, 1, 4), vec![0.0; 8]).unwrap();
        let loss = cross_entropy_mean(&logits, &[1, 3], &mut trace()).unwrap();
        assert!((loss.data()[0] - (4.0f64).ln()).abs() < 1e-12);
    }
}
