//! Forward and backward kernels for the fixed operator set.
//!
//! Every op is a pure function over value-semantic tensors. Backward kernels
//! take whatever forward context they need explicitly, so each op can be
//! gradient-checked in isolation against central finite differences.

use serde::{Deserialize, Serialize};

use super::Tensor4;
use crate::error::{PylonError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PadMode {
    Zeros,
    Circular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeMode {
    /// Edge-clamped sampling (default).
    Clamp,
    /// Wraparound sampling, used by circular-pad builds so equivariance is exact.
    Wrap,
}

// ---------------------------------------------------------------------------
// conv2d

/// Pad an input plane set into an (h + 2p, w + 2p) buffer.
fn pad_input(input: &Tensor4, padding: usize, mode: PadMode) -> Tensor4 {
    if padding == 0 {
        return input.clone();
    }
    let (n, c, h, w) = input.shape();
    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
    let mut out = Tensor4::zeros(n, c, ph, pw);
    let p = padding as isize;
    for ni in 0..n {
        for ci in 0..c {
            for py in 0..ph {
                let sy = py as isize - p;
                let sy = match mode {
                    PadMode::Zeros => {
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        sy as usize
                    }
                    PadMode::Circular => sy.rem_euclid(h as isize) as usize,
                };
                for px in 0..pw {
                    let sx = px as isize - p;
                    let sx = match mode {
                        PadMode::Zeros => {
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            sx as usize
                        }
                        PadMode::Circular => sx.rem_euclid(w as isize) as usize,
                    };
                    *out.at_mut(ni, ci, py, px) = input.at(ni, ci, sy, sx);
                }
            }
        }
    }
    out
}

/// Fold a padded-input gradient back onto the original extent.
fn unpad_grad(gpad: &Tensor4, h: usize, w: usize, padding: usize, mode: PadMode) -> Tensor4 {
    if padding == 0 {
        return gpad.clone();
    }
    let (n, c, ph, pw) = gpad.shape();
    let mut out = Tensor4::zeros(n, c, h, w);
    let p = padding as isize;
    for ni in 0..n {
        for ci in 0..c {
            for py in 0..ph {
                let sy = py as isize - p;
                let sy = match mode {
                    PadMode::Zeros => {
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        sy as usize
                    }
                    PadMode::Circular => sy.rem_euclid(h as isize) as usize,
                };
                for px in 0..pw {
                    let sx = px as isize - p;
                    let sx = match mode {
                        PadMode::Zeros => {
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            sx as usize
                        }
                        PadMode::Circular => sx.rem_euclid(w as isize) as usize,
                    };
                    *out.at_mut(ni, ci, sy, sx) += gpad.at(ni, ci, py, px);
                }
            }
        }
    }
    out
}

fn conv_check(input: &Tensor4, weight: &Tensor4, stride: usize, padding: usize, pad_mode: PadMode) -> Result<(usize, usize)> {
    let (_, c_in, kh, kw) = weight.shape();
    if c_in != input.c {
        return Err(PylonError::Dimension(format!(
            "conv2d: input has {} channels, kernel expects {}",
            input.c, c_in
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(PylonError::Config(format!("conv2d: kernel dims must be odd, got {kh}x{kw}")));
    }
    if stride == 0 {
        return Err(PylonError::Config("conv2d: stride must be >= 1".into()));
    }
    if pad_mode == PadMode::Circular && padding > kh / 2 {
        return Err(PylonError::Config(format!(
            "conv2d: circular padding {padding} exceeds kernel radius {}",
            kh / 2
        )));
    }
    let oh = (input.h + 2 * padding).checked_sub(kh).map(|v| v / stride + 1);
    let ow = (input.w + 2 * padding).checked_sub(kw).map(|v| v / stride + 1);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((oh, ow)),
        _ => Err(PylonError::Config(format!(
            "conv2d: empty output for input {}x{} kernel {kh}x{kw} stride {stride} padding {padding}",
            input.h, input.w
        ))),
    }
}

/// 2-D cross-correlation. Weight shape is (c_out, c_in, kh, kw); kernel dims odd.
pub fn conv2d(
    input: &Tensor4,
    weight: &Tensor4,
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
    pad_mode: PadMode,
) -> Result<Tensor4> {
    let (c_out, c_in, kh, kw) = weight.shape();
    let (oh, ow) = conv_check(input, weight, stride, padding, pad_mode)?;
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(PylonError::Dimension(format!(
                "conv2d: bias length {} != c_out {c_out}",
                b.len()
            )));
        }
    }
    let pad = pad_input(input, padding, pad_mode);
    let n = input.n;
    let mut out = Tensor4::zeros(n, c_out, oh, ow);
    for ni in 0..n {
        for co in 0..c_out {
            if let Some(b) = bias {
                let start = out.idx(ni, co, 0, 0);
                out.data[start..start + oh * ow].iter_mut().for_each(|v| *v = b[co]);
            }
            for ci in 0..c_in {
                for ky in 0..kh {
                    for oy in 0..oh {
                        let in_row = pad.row(ni, ci, oy * stride + ky);
                        let o_start = out.idx(ni, co, oy, 0);
                        let out_row = &mut out.data[o_start..o_start + ow];
                        for kx in 0..kw {
                            let wv = weight.at(co, ci, ky, kx);
                            if wv == 0.0 {
                                continue;
                            }
                            if stride == 1 {
                                for (ox, o) in out_row.iter_mut().enumerate() {
                                    *o += wv * in_row[ox + kx];
                                }
                            } else {
                                for (ox, o) in out_row.iter_mut().enumerate() {
                                    *o += wv * in_row[ox * stride + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of conv2d w.r.t. input, weight and bias.
pub fn conv2d_backward(
    input: &Tensor4,
    weight: &Tensor4,
    stride: usize,
    padding: usize,
    pad_mode: PadMode,
    grad_out: &Tensor4,
) -> Result<(Tensor4, Tensor4, Vec<f64>)> {
    let (c_out, c_in, kh, kw) = weight.shape();
    let (oh, ow) = conv_check(input, weight, stride, padding, pad_mode)?;
    if grad_out.shape() != (input.n, c_out, oh, ow) {
        return Err(PylonError::Dimension("conv2d_backward: grad shape mismatch".into()));
    }
    let pad = pad_input(input, padding, pad_mode);
    let n = input.n;
    let mut gpad = Tensor4::zeros(n, c_in, pad.h, pad.w);
    let mut gw = Tensor4::zeros(c_out, c_in, kh, kw);
    let mut gb = vec![0.0; c_out];

    for ni in 0..n {
        for co in 0..c_out {
            let go_plane = grad_out.plane(ni, co);
            gb[co] += go_plane.iter().sum::<f64>();
            for ci in 0..c_in {
                for ky in 0..kh {
                    for oy in 0..oh {
                        let go_row = grad_out.row(ni, co, oy);
                        let iy = oy * stride + ky;
                        let in_row = pad.row(ni, ci, iy);
                        let gp_start = gpad.idx(ni, ci, iy, 0);
                        for kx in 0..kw {
                            let wv = weight.at(co, ci, ky, kx);
                            let mut acc = 0.0;
                            if stride == 1 {
                                let gp_row = &mut gpad.data[gp_start + kx..gp_start + kx + ow];
                                for ox in 0..ow {
                                    let g = go_row[ox];
                                    gp_row[ox] += wv * g;
                                    acc += g * in_row[ox + kx];
                                }
                            } else {
                                for ox in 0..ow {
                                    let g = go_row[ox];
                                    gpad.data[gp_start + ox * stride + kx] += wv * g;
                                    acc += g * in_row[ox * stride + kx];
                                }
                            }
                            *gw.at_mut(co, ci, ky, kx) += acc;
                        }
                    }
                }
            }
        }
    }
    let gi = unpad_grad(&gpad, input.h, input.w, padding, pad_mode);
    Ok((gi, gw, gb))
}

// ---------------------------------------------------------------------------
// normalization

/// Per-channel batch statistics captured during a train-mode forward.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn check_affine(input: &Tensor4, gamma: &[f64], beta: &[f64]) -> Result<()> {
    if gamma.len() != input.c || beta.len() != input.c {
        return Err(PylonError::Dimension(format!(
            "norm: gamma/beta length {}/{} != channels {}",
            gamma.len(),
            beta.len(),
            input.c
        )));
    }
    Ok(())
}

/// Train-mode batch norm: normalize per channel over (n, h, w), then affine.
pub fn batch_norm_train(
    input: &Tensor4,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(Tensor4, BnCache)> {
    check_affine(input, gamma, beta)?;
    let (n, c, h, w) = input.shape();
    let m = n * h * w;
    if m < 2 {
        return Err(PylonError::Numerical(
            "batch_norm: train mode needs n*h*w >= 2 per channel".into(),
        ));
    }
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut s = 0.0;
        for ni in 0..n {
            s += input.plane(ni, ci).iter().sum::<f64>();
        }
        let mu = s / m as f64;
        let mut v = 0.0;
        for ni in 0..n {
            v += input.plane(ni, ci).iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>();
        }
        mean[ci] = mu;
        var[ci] = v / m as f64;
    }
    let mut out = Tensor4::zeros(n, c, h, w);
    for ni in 0..n {
        for ci in 0..c {
            let istd = 1.0 / (var[ci] + eps).sqrt();
            let (g, b, mu) = (gamma[ci], beta[ci], mean[ci]);
            let src = input.plane(ni, ci);
            let start = out.idx(ni, ci, 0, 0);
            for (o, &x) in out.data[start..start + h * w].iter_mut().zip(src) {
                *o = g * (x - mu) * istd + b;
            }
        }
    }
    Ok((out, BnCache { mean, var }))
}

/// Eval-mode batch norm using running statistics.
pub fn batch_norm_eval(
    input: &Tensor4,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<Tensor4> {
    check_affine(input, gamma, beta)?;
    let (n, c, h, w) = input.shape();
    let mut out = Tensor4::zeros(n, c, h, w);
    for ni in 0..n {
        for ci in 0..c {
            let istd = 1.0 / (running_var[ci] + eps).sqrt();
            let (g, b, mu) = (gamma[ci], beta[ci], running_mean[ci]);
            let src = input.plane(ni, ci);
            let start = out.idx(ni, ci, 0, 0);
            for (o, &x) in out.data[start..start + h * w].iter_mut().zip(src) {
                *o = g * (x - mu) * istd + b;
            }
        }
    }
    Ok(out)
}

/// In-place running-stat update, momentum-weighted toward the batch stats.
pub fn update_running_stats(
    running_mean: &mut [f64],
    running_var: &mut [f64],
    cache: &BnCache,
    momentum: f64,
) {
    for ci in 0..running_mean.len() {
        running_mean[ci] = (1.0 - momentum) * running_mean[ci] + momentum * cache.mean[ci];
        running_var[ci] = (1.0 - momentum) * running_var[ci] + momentum * cache.var[ci];
    }
}

pub fn batch_norm_train_backward(
    input: &Tensor4,
    gamma: &[f64],
    cache: &BnCache,
    eps: f64,
    grad_out: &Tensor4,
) -> (Tensor4, Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = input.shape();
    let m = (n * h * w) as f64;
    let mut gi = Tensor4::zeros(n, c, h, w);
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ci in 0..c {
        let mu = cache.mean[ci];
        let istd = 1.0 / (cache.var[ci] + eps).sqrt();
        // Group reductions over (n, h, w).
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for ni in 0..n {
            let x = input.plane(ni, ci);
            let g = grad_out.plane(ni, ci);
            for (xv, gv) in x.iter().zip(g) {
                let xhat = (xv - mu) * istd;
                let dxhat = gv * gamma[ci];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
                dgamma[ci] += gv * xhat;
                dbeta[ci] += gv;
            }
        }
        let mean_dxhat = sum_dxhat / m;
        let mean_dxhat_xhat = sum_dxhat_xhat / m;
        for ni in 0..n {
            let x = input.plane(ni, ci);
            let start = gi.idx(ni, ci, 0, 0);
            let gplane = grad_out.plane(ni, ci);
            for ((o, &xv), &gv) in gi.data[start..start + h * w].iter_mut().zip(x).zip(gplane) {
                let xhat = (xv - mu) * istd;
                let dxhat = gv * gamma[ci];
                *o = istd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
            }
        }
    }
    (gi, dgamma, dbeta)
}

pub fn batch_norm_eval_backward(
    gamma: &[f64],
    running_var: &[f64],
    eps: f64,
    grad_out: &Tensor4,
) -> Tensor4 {
    let (n, c, h, w) = grad_out.shape();
    let mut gi = Tensor4::zeros(n, c, h, w);
    for ni in 0..n {
        for ci in 0..c {
            let scale = gamma[ci] / (running_var[ci] + eps).sqrt();
            let start = gi.idx(ni, ci, 0, 0);
            let g = grad_out.plane(ni, ci);
            for (o, &gv) in gi.data[start..start + h * w].iter_mut().zip(g) {
                *o = gv * scale;
            }
        }
    }
    gi
}

/// Per-(sample, group) statistics for group norm backward.
#[derive(Debug, Clone)]
pub struct GnCache {
    pub mean: Vec<f64>, // n * n_groups
    pub var: Vec<f64>,
}

/// Group norm: per sample, normalize over each group's (channels, h, w).
/// Batch-independent by construction.
pub fn group_norm(
    input: &Tensor4,
    n_groups: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(Tensor4, GnCache)> {
    check_affine(input, gamma, beta)?;
    let (n, c, h, w) = input.shape();
    if n_groups == 0 || c % n_groups != 0 {
        return Err(PylonError::Config(format!(
            "group_norm: {c} channels not divisible by {n_groups} groups"
        )));
    }
    let gsize = c / n_groups;
    let m = (gsize * h * w) as f64;
    let mut mean = vec![0.0; n * n_groups];
    let mut var = vec![0.0; n * n_groups];
    let mut out = Tensor4::zeros(n, c, h, w);
    for ni in 0..n {
        for gi in 0..n_groups {
            let mut s = 0.0;
            for ci in gi * gsize..(gi + 1) * gsize {
                s += input.plane(ni, ci).iter().sum::<f64>();
            }
            let mu = s / m;
            let mut v = 0.0;
            for ci in gi * gsize..(gi + 1) * gsize {
                v += input.plane(ni, ci).iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>();
            }
            let va = v / m;
            mean[ni * n_groups + gi] = mu;
            var[ni * n_groups + gi] = va;
            let istd = 1.0 / (va + eps).sqrt();
            for ci in gi * gsize..(gi + 1) * gsize {
                let src = input.plane(ni, ci);
                let start = out.idx(ni, ci, 0, 0);
                let (g, b) = (gamma[ci], beta[ci]);
                for (o, &x) in out.data[start..start + h * w].iter_mut().zip(src) {
                    *o = g * (x - mu) * istd + b;
                }
            }
        }
    }
    Ok((out, GnCache { mean, var }))
}

pub fn group_norm_backward(
    input: &Tensor4,
    n_groups: usize,
    gamma: &[f64],
    cache: &GnCache,
    eps: f64,
    grad_out: &Tensor4,
) -> (Tensor4, Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = input.shape();
    let gsize = c / n_groups;
    let m = (gsize * h * w) as f64;
    let mut gi_t = Tensor4::zeros(n, c, h, w);
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ni in 0..n {
        for gi in 0..n_groups {
            let mu = cache.mean[ni * n_groups + gi];
            let istd = 1.0 / (cache.var[ni * n_groups + gi] + eps).sqrt();
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for ci in gi * gsize..(gi + 1) * gsize {
                let x = input.plane(ni, ci);
                let g = grad_out.plane(ni, ci);
                for (xv, gv) in x.iter().zip(g) {
                    let xhat = (xv - mu) * istd;
                    let dxhat = gv * gamma[ci];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    dgamma[ci] += gv * xhat;
                    dbeta[ci] += gv;
                }
            }
            let mean_dxhat = sum_dxhat / m;
            let mean_dxhat_xhat = sum_dxhat_xhat / m;
            for ci in gi * gsize..(gi + 1) * gsize {
                let x = input.plane(ni, ci);
                let start = gi_t.idx(ni, ci, 0, 0);
                let g = grad_out.plane(ni, ci);
                for ((o, &xv), &gv) in gi_t.data[start..start + h * w].iter_mut().zip(x).zip(g) {
                    let xhat = (xv - mu) * istd;
                    let dxhat = gv * gamma[ci];
                    *o = istd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            }
        }
    }
    (gi_t, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// pointwise activations

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub fn pointwise_activation(input: &Tensor4, kind: Activation) -> Tensor4 {
    match kind {
        Activation::Relu => input.map(|v| v.max(0.0)),
        Activation::Sigmoid => input.map(sigmoid),
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn pointwise_activation_backward(
    input: &Tensor4,
    kind: Activation,
    grad_out: &Tensor4,
) -> Tensor4 {
    match kind {
        Activation::Relu => {
            let mut g = grad_out.clone();
            for (gv, &x) in g.data.iter_mut().zip(&input.data) {
                if x <= 0.0 {
                    *gv = 0.0;
                }
            }
            g
        }
        Activation::Sigmoid => {
            let mut g = grad_out.clone();
            for (gv, &x) in g.data.iter_mut().zip(&input.data) {
                let y = sigmoid(x);
                *gv *= y * (1.0 - y);
            }
            g
        }
    }
}

// ---------------------------------------------------------------------------
// pooling

/// 2x2 max pooling with stride 2. Odd spatial dims are rejected.
/// Returns the pooled map and per-output flat argmax indices into each
/// input plane (first row-major maximum on ties).
pub fn max_pool2d(input: &Tensor4) -> Result<(Tensor4, Vec<u32>)> {
    let (n, c, h, w) = input.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(PylonError::Dimension(format!(
            "max_pool2d: spatial dims must be even, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor4::zeros(n, c, oh, ow);
    let mut arg = vec![0u32; n * c * oh * ow];
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0u32;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (y, x) = (oy * 2 + dy, ox * 2 + dx);
                            let v = input.at(ni, ci, y, x);
                            if v > best {
                                best = v;
                                best_i = (y * w + x) as u32;
                            }
                        }
                    }
                    *out.at_mut(ni, ci, oy, ox) = best;
                    arg[out.idx(ni, ci, oy, ox)] = best_i;
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool2d_backward(
    input_shape: (usize, usize, usize, usize),
    argmax: &[u32],
    grad_out: &Tensor4,
) -> Tensor4 {
    let (n, c, h, w) = input_shape;
    let mut gi = Tensor4::zeros(n, c, h, w);
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..grad_out.h {
                for ox in 0..grad_out.w {
                    let oi = grad_out.idx(ni, ci, oy, ox);
                    let flat = argmax[oi] as usize;
                    let start = gi.idx(ni, ci, 0, 0);
                    gi.data[start + flat] += grad_out.data[oi];
                }
            }
        }
    }
    gi
}

/// Spatial max per (sample, channel); output shape (n, c, 1, 1).
/// Ties route the gradient to the first row-major argmax.
pub fn global_max_pool(input: &Tensor4) -> (Tensor4, Vec<u32>) {
    let (n, c, _, _) = input.shape();
    let mut out = Tensor4::zeros(n, c, 1, 1);
    let mut arg = vec![0u32; n * c];
    for ni in 0..n {
        for ci in 0..c {
            let plane = input.plane(ni, ci);
            let mut best = f64::NEG_INFINITY;
            let mut best_i = 0u32;
            for (i, &v) in plane.iter().enumerate() {
                if v > best {
                    best = v;
                    best_i = i as u32;
                }
            }
            *out.at_mut(ni, ci, 0, 0) = best;
            arg[ni * c + ci] = best_i;
        }
    }
    (out, arg)
}

pub fn global_max_pool_backward(
    input_shape: (usize, usize, usize, usize),
    argmax: &[u32],
    grad_out: &Tensor4,
) -> Tensor4 {
    let (n, c, h, w) = input_shape;
    let mut gi = Tensor4::zeros(n, c, h, w);
    for ni in 0..n {
        for ci in 0..c {
            let start = gi.idx(ni, ci, 0, 0);
            gi.data[start + argmax[ni * c + ci] as usize] = grad_out.at(ni, ci, 0, 0);
        }
    }
    gi
}

/// Spatial mean per (sample, channel); output shape (n, c, 1, 1).
pub fn global_avg_pool(input: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = input.shape();
    let m = (h * w) as f64;
    let mut out = Tensor4::zeros(n, c, 1, 1);
    for ni in 0..n {
        for ci in 0..c {
            *out.at_mut(ni, ci, 0, 0) = input.plane(ni, ci).iter().sum::<f64>() / m;
        }
    }
    out
}

pub fn global_avg_pool_backward(
    input_shape: (usize, usize, usize, usize),
    grad_out: &Tensor4,
) -> Tensor4 {
    let (n, c, h, w) = input_shape;
    let m = (h * w) as f64;
    let mut gi = Tensor4::zeros(n, c, h, w);
    for ni in 0..n {
        for ci in 0..c {
            let g = grad_out.at(ni, ci, 0, 0) / m;
            let start = gi.idx(ni, ci, 0, 0);
            gi.data[start..start + h * w].iter_mut().for_each(|v| *v = g);
        }
    }
    gi
}

// ---------------------------------------------------------------------------
// bilinear upsampling

#[inline]
fn resolve_coord(s: isize, size: usize, edge: EdgeMode) -> usize {
    match edge {
        EdgeMode::Clamp => s.clamp(0, size as isize - 1) as usize,
        EdgeMode::Wrap => s.rem_euclid(size as isize) as usize,
    }
}

/// Source taps for one destination index under the integer-aligned
/// convention: src = dst * (src_size / dst_size). Strided convolutions put
/// the receptive-field center of cell `o` at input coordinate
/// `stride * o + const`, so this mapping keeps an upsampled deep feature map
/// exactly aligned with the shallower map it is fused with; a half-pixel
/// convention would skew the decoder by half the stride ratio per fusion.
fn bilinear_taps(dst: usize, src_size: usize, dst_size: usize, edge: EdgeMode) -> (usize, usize, f64) {
    let s = dst as f64 * (src_size as f64 / dst_size as f64);
    let s0 = s.floor();
    let frac = s - s0;
    let i0 = resolve_coord(s0 as isize, src_size, edge);
    let i1 = resolve_coord(s0 as isize + 1, src_size, edge);
    (i0, i1, frac)
}

/// Bilinear upsampling to (th, tw). Target must be at least the input size;
/// downsampling is max-pool only.
pub fn bilinear_upsample(input: &Tensor4, th: usize, tw: usize, edge: EdgeMode) -> Result<Tensor4> {
    let (n, c, h, w) = input.shape();
    if th < h || tw < w {
        return Err(PylonError::Config(format!(
            "bilinear_upsample: target {th}x{tw} smaller than input {h}x{w}"
        )));
    }
    let mut out = Tensor4::zeros(n, c, th, tw);
    // Precompute per-axis taps once.
    let ys: Vec<_> = (0..th).map(|y| bilinear_taps(y, h, th, edge)).collect();
    let xs: Vec<_> = (0..tw).map(|x| bilinear_taps(x, w, tw, edge)).collect();
    for ni in 0..n {
        for ci in 0..c {
            for (dy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let r0 = input.row(ni, ci, y0);
                let r1 = input.row(ni, ci, y1);
                let start = out.idx(ni, ci, dy, 0);
                let orow = &mut out.data[start..start + tw];
                for (dx, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
                    let bot = r1[x0] * (1.0 - fx) + r1[x1] * fx;
                    orow[dx] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    Ok(out)
}

pub fn bilinear_upsample_backward(
    input_shape: (usize, usize, usize, usize),
    edge: EdgeMode,
    grad_out: &Tensor4,
) -> Tensor4 {
    let (n, c, h, w) = input_shape;
    let (th, tw) = (grad_out.h, grad_out.w);
    let mut gi = Tensor4::zeros(n, c, h, w);
    let ys: Vec<_> = (0..th).map(|y| bilinear_taps(y, h, th, edge)).collect();
    let xs: Vec<_> = (0..tw).map(|x| bilinear_taps(x, w, tw, edge)).collect();
    for ni in 0..n {
        for ci in 0..c {
            for (dy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let grow = grad_out.row(ni, ci, dy);
                for (dx, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let g = grow[dx];
                    *gi.at_mut(ni, ci, y0, x0) += g * (1.0 - fy) * (1.0 - fx);
                    *gi.at_mut(ni, ci, y0, x1) += g * (1.0 - fy) * fx;
                    *gi.at_mut(ni, ci, y1, x0) += g * fy * (1.0 - fx);
                    *gi.at_mut(ni, ci, y1, x1) += g * fy * fx;
                }
            }
        }
    }
    gi
}

// ---------------------------------------------------------------------------
// loss

/// Mean binary cross entropy over all (sample, class) pairs, computed in the
/// stable log-sum-exp form. Logits and 0/1 targets share shape (n, c, 1, 1).
pub fn bce_with_logits(logits: &Tensor4, targets: &Tensor4) -> Result<f64> {
    if !logits.same_shape(targets) {
        return Err(PylonError::Dimension("bce_with_logits: shape mismatch".into()));
    }
    for &t in &targets.data {
        if t != 0.0 && t != 1.0 {
            return Err(PylonError::Input(format!("bce_with_logits: non-binary target {t}")));
        }
    }
    let mut acc = 0.0;
    for (&z, &t) in logits.data.iter().zip(&targets.data) {
        // max(z, 0) - z*t + ln(1 + exp(-|z|))
        acc += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
    }
    Ok(acc / logits.data.len() as f64)
}

/// d loss / d logits for the mean-reduced BCE above.
pub fn bce_with_logits_backward(logits: &Tensor4, targets: &Tensor4) -> Tensor4 {
    let m = logits.data.len() as f64;
    let mut g = logits.clone();
    for (gv, &t) in g.data.iter_mut().zip(&targets.data) {
        *gv = (sigmoid(*gv) - t) / m;
    }
    g
}

// ---------------------------------------------------------------------------
// elementwise combination (wiring for the model graphs)

pub fn add(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    if !a.same_shape(b) {
        return Err(PylonError::Dimension("add: shape mismatch".into()));
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

pub fn mul(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    if !a.same_shape(b) {
        return Err(PylonError::Dimension("mul: shape mismatch".into()));
    }
    let mut out = a.clone();
    for (o, &bv) in out.data.iter_mut().zip(&b.data) {
        *o *= bv;
    }
    Ok(out)
}

/// Scale every spatial position of `x` by the per-(sample, channel) scalar `s`
/// (shape (n, c, 1, 1)).
pub fn mul_channel(x: &Tensor4, s: &Tensor4) -> Result<Tensor4> {
    check_channel_broadcast(x, s)?;
    let mut out = x.clone();
    for ni in 0..x.n {
        for ci in 0..x.c {
            let sv = s.at(ni, ci, 0, 0);
            let start = out.idx(ni, ci, 0, 0);
            out.data[start..start + x.h * x.w].iter_mut().for_each(|v| *v *= sv);
        }
    }
    Ok(out)
}

/// Add the per-(sample, channel) scalar `s` to every spatial position of `x`.
pub fn add_channel(x: &Tensor4, s: &Tensor4) -> Result<Tensor4> {
    check_channel_broadcast(x, s)?;
    let mut out = x.clone();
    for ni in 0..x.n {
        for ci in 0..x.c {
            let sv = s.at(ni, ci, 0, 0);
            let start = out.idx(ni, ci, 0, 0);
            out.data[start..start + x.h * x.w].iter_mut().for_each(|v| *v += sv);
        }
    }
    Ok(out)
}

fn check_channel_broadcast(x: &Tensor4, s: &Tensor4) -> Result<()> {
    if s.n != x.n || s.c != x.c || s.h != 1 || s.w != 1 {
        return Err(PylonError::Dimension(format!(
            "channel broadcast: scalar shape {:?} does not match {:?}",
            s.shape(),
            x.shape()
        )));
    }
    Ok(())
}

/// Reduce a full-shape gradient to the (n, c, 1, 1) broadcast operand.
pub fn reduce_channel_grad(grad: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = grad.shape();
    let mut out = Tensor4::zeros(n, c, 1, 1);
    for ni in 0..n {
        for ci in 0..c {
            *out.at_mut(ni, ci, 0, 0) = grad.plane(ni, ci).iter().sum::<f64>();
        }
        let _ = h;
        let _ = w;
    }
    out
}
