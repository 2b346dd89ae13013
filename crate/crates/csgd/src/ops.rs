//! Forward and backward math for every supported operation.
//!
//! All image tensors are `[n, h, w, c]` (batch, height, width, channel) and
//! convolution kernels are `[u, v, c_in, c_out]` with the filter axis last.
//! Convolution is lowered to an im2col matrix product; the remaining ops are
//! straightforward loops. Per-channel reductions (batch-norm statistics, loss
//! averaging) accumulate in f64 before casting back to f32.
//!
//! Each `xxx_backward` returns the gradients of the op's differentiable
//! inputs given the gradient of its output. The eval-only batch-norm variant
//! has no backward: training normalizes with batch statistics.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Added to the batch variance before the square root, so the stored standard
/// deviation is strictly positive and the eval-mode transform is literal.
pub const BN_STABILIZER: f32 = 1e-5;

// ---------------------------------------------------------------------------
// Matrix products (row-major, f32), backed by `matrixmultiply::sgemm`.
// ---------------------------------------------------------------------------

/// `c = a · b` where `a` is `[m, k]`, `b` is `[k, n]`, `c` is `[m, n]`.
pub(crate) fn matmul(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        c.fill(0.0);
        return;
    }
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = aᵀ · b` where `a` is stored `[m, k]`, `b` is `[m, n]`, `c` is `[k, n]`.
pub(crate) fn matmul_at_b(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    if m == 0 || k == 0 || n == 0 {
        c.fill(0.0);
        return;
    }
    unsafe {
        matrixmultiply::sgemm(
            k,
            m,
            n,
            1.0,
            a.as_ptr(),
            1,
            k as isize,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = a · bᵀ` where `a` is `[m, k]`, `b` is stored `[n, k]`, `c` is `[m, n]`.
pub(crate) fn matmul_a_bt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        c.fill(0.0);
        return;
    }
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

pub(crate) fn conv_out_dim(
    input: usize,
    window: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    let padded = input + 2 * padding;
    if padded < window {
        return Err(Error::InvalidArgument(format!(
            "window {window} larger than padded input {padded}"
        )));
    }
    if !(padded - window).is_multiple_of(stride) {
        return Err(Error::InvalidArgument(format!(
            "non-integral output dim: ({input} + 2*{padding} - {window}) not divisible by stride {stride}"
        )));
    }
    Ok((padded - window) / stride + 1)
}

/// Write the `[n·ho·wo, u·v·c]` patch matrix for `x` (`[n, h, w, c]`).
/// `cols` must be zero-filled; out-of-bounds (padding) entries stay zero.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    u: usize,
    v: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f32],
) {
    let patch = u * v * c;
    let mut row = 0usize;
    for img in 0..n {
        let x_img = &x[img * h * w * c..(img + 1) * h * w * c];
        for oy in 0..ho {
            for ox in 0..wo {
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for ky in 0..u {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..v {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = (iy as usize * w + ix as usize) * c;
                        let d = (ky * v + kx) * c;
                        dst[d..d + c].copy_from_slice(&x_img[src..src + c]);
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add the patch-matrix gradient back onto the input gradient.
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    dcols: &[f32],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    u: usize,
    v: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    dx: &mut [f32],
) {
    let patch = u * v * c;
    let mut row = 0usize;
    for img in 0..n {
        let dx_img = &mut dx[img * h * w * c..(img + 1) * h * w * c];
        for oy in 0..ho {
            for ox in 0..wo {
                let src_row = &dcols[row * patch..(row + 1) * patch];
                for ky in 0..u {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..v {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = (iy as usize * w + ix as usize) * c;
                        let s = (ky * v + kx) * c;
                        for ch in 0..c {
                            dx_img[dst + ch] += src_row[s + ch];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// 2-D convolution: output channel `j` is `Σ_k input[..,k] ∗ kernel[..,k,j]`.
pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let [n, h, w, c_in] = x.dims4("conv2d input")?;
    let [u, v, kc_in, c_out] = kernel.dims4("conv2d kernel")?;
    if kc_in != c_in {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: format!("input channels {c_in}"),
            right: format!("kernel input channels {kc_in}"),
        });
    }
    let ho = conv_out_dim(h, u, stride, padding)?;
    let wo = conv_out_dim(w, v, stride, padding)?;
    let m = n * ho * wo;
    let patch = u * v * c_in;
    let mut cols = vec![0.0f32; m * patch];
    im2col(
        x.data(),
        n,
        h,
        w,
        c_in,
        u,
        v,
        stride,
        padding,
        ho,
        wo,
        &mut cols,
    );
    let mut out = vec![0.0f32; m * c_out];
    matmul(m, patch, c_out, &cols, kernel.data(), &mut out);
    Tensor::new([n, ho, wo, c_out], out)
}

/// Gradients of `conv2d` w.r.t. input and kernel.
pub fn conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    dout: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let [n, h, w, c_in] = x.dims4("conv2d input")?;
    let [u, v, _, c_out] = kernel.dims4("conv2d kernel")?;
    let ho = conv_out_dim(h, u, stride, padding)?;
    let wo = conv_out_dim(w, v, stride, padding)?;
    let m = n * ho * wo;
    let patch = u * v * c_in;

    let mut cols = vec![0.0f32; m * patch];
    im2col(
        x.data(),
        n,
        h,
        w,
        c_in,
        u,
        v,
        stride,
        padding,
        ho,
        wo,
        &mut cols,
    );

    let mut dkernel = vec![0.0f32; patch * c_out];
    matmul_at_b(m, patch, c_out, &cols, dout.data(), &mut dkernel);

    let mut dcols = vec![0.0f32; m * patch];
    matmul_a_bt(m, c_out, patch, dout.data(), kernel.data(), &mut dcols);
    let mut dx = vec![0.0f32; n * h * w * c_in];
    col2im_add(
        &dcols,
        n,
        h,
        w,
        c_in,
        u,
        v,
        stride,
        padding,
        ho,
        wo,
        &mut dx,
    );

    Ok((
        Tensor::new([n, h, w, c_in], dx)?,
        Tensor::new([u, v, c_in, c_out], dkernel)?,
    ))
}

// ---------------------------------------------------------------------------
// Per-channel bias, activation, elementwise ops
// ---------------------------------------------------------------------------

/// Add a per-channel bias along the last axis.
pub fn bias_add(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = bias.dims1("bias_add bias")?;
    let last = *x.shape().last().ok_or_else(|| {
        Error::InvalidArgument("bias_add needs a non-scalar input".into())
    })?;
    if last != c {
        return Err(Error::ShapeMismatch {
            op: "bias_add",
            left: format!("input last dim {last}"),
            right: format!("bias length {c}"),
        });
    }
    let b = bias.data();
    let out = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v + b[i % c])
        .collect();
    Tensor::new(x.shape(), out)
}

/// Gradient of `bias_add`: pass-through for the input, channel sums for the bias.
pub fn bias_add_backward(dout: &Tensor, c: usize) -> (Tensor, Tensor) {
    let mut db = vec![0.0f64; c];
    for (i, g) in dout.data().iter().enumerate() {
        db[i % c] += *g as f64;
    }
    let db: Vec<f32> = db.into_iter().map(|v| v as f32).collect();
    (
        dout.clone(),
        Tensor::new([c], db).expect("bias grad shape"),
    )
}

pub fn relu(x: &Tensor) -> Tensor {
    let out = x.data().iter().map(|v| v.max(0.0)).collect();
    Tensor::new(x.shape(), out).expect("relu shape")
}

pub fn relu_backward(x: &Tensor, dout: &Tensor) -> Tensor {
    let dx = x
        .data()
        .iter()
        .zip(dout.data())
        .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
        .collect();
    Tensor::new(x.shape(), dx).expect("relu grad shape")
}

/// Elementwise sum of two same-shape tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "add",
            left: format!("{:?}", a.shape()),
            right: format!("{:?}", b.shape()),
        });
    }
    let out = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| x + y)
        .collect();
    Tensor::new(a.shape(), out)
}

/// Elementwise product of two same-shape tensors.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "mul",
            left: format!("{:?}", a.shape()),
            right: format!("{:?}", b.shape()),
        });
    }
    let out = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| x * y)
        .collect();
    Tensor::new(a.shape(), out)
}

pub fn scale(x: &Tensor, factor: f32) -> Tensor {
    let out = x.data().iter().map(|v| v * factor).collect();
    Tensor::new(x.shape(), out).expect("scale shape")
}

/// Sum of all elements, as a scalar tensor (f64 accumulation).
pub fn sum_all(x: &Tensor) -> Tensor {
    let s: f64 = x.data().iter().map(|v| *v as f64).sum();
    Tensor::scalar(s as f32)
}

/// Concatenate along the channel (last) axis of rank-4 tensors.
pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
    if parts.len() < 2 {
        return Err(Error::InvalidArgument(
            "concat needs at least two inputs".into(),
        ));
    }
    let [n, h, w, _] = parts[0].dims4("concat input")?;
    let mut c_total = 0usize;
    for p in parts {
        let [pn, ph, pw, pc] = p.dims4("concat input")?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::ShapeMismatch {
                op: "concat",
                left: format!("{:?}", parts[0].shape()),
                right: format!("{:?}", p.shape()),
            });
        }
        c_total += pc;
    }
    let mut out = vec![0.0f32; n * h * w * c_total];
    let pixels = n * h * w;
    let mut offset = 0usize;
    for p in parts {
        let pc = p.shape()[3];
        let src = p.data();
        for px in 0..pixels {
            out[px * c_total + offset..px * c_total + offset + pc]
                .copy_from_slice(&src[px * pc..(px + 1) * pc]);
        }
        offset += pc;
    }
    Tensor::new([n, h, w, c_total], out)
}

/// Split the concat gradient back into per-part gradients.
pub fn concat_channels_backward(dout: &Tensor, part_channels: &[usize]) -> Vec<Tensor> {
    let [n, h, w, c_total] = dout.dims4("concat grad").expect("concat grad rank");
    debug_assert_eq!(part_channels.iter().sum::<usize>(), c_total);
    let pixels = n * h * w;
    let src = dout.data();
    let mut grads = Vec::with_capacity(part_channels.len());
    let mut offset = 0usize;
    for &pc in part_channels {
        let mut g = vec![0.0f32; pixels * pc];
        for px in 0..pixels {
            g[px * pc..(px + 1) * pc]
                .copy_from_slice(&src[px * c_total + offset..px * c_total + offset + pc]);
        }
        grads.push(Tensor::new([n, h, w, pc], g).expect("concat grad shape"));
        offset += pc;
    }
    grads
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

pub fn avgpool2d(x: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let [n, h, w, c] = x.dims4("avgpool2d input")?;
    let ho = conv_out_dim(h, window, stride, 0)?;
    let wo = conv_out_dim(w, window, stride, 0)?;
    let src = x.data();
    let inv = 1.0 / (window * window) as f32;
    let mut out = vec![0.0f32; n * ho * wo * c];
    for img in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let dst = ((img * ho + oy) * wo + ox) * c;
                for ky in 0..window {
                    for kx in 0..window {
                        let s = ((img * h + oy * stride + ky) * w + ox * stride + kx) * c;
                        for ch in 0..c {
                            out[dst + ch] += src[s + ch];
                        }
                    }
                }
                for ch in 0..c {
                    out[dst + ch] *= inv;
                }
            }
        }
    }
    Tensor::new([n, ho, wo, c], out)
}

pub fn avgpool2d_backward(
    x_shape: &[usize],
    window: usize,
    stride: usize,
    dout: &Tensor,
) -> Tensor {
    let (n, h, w, c) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let [_, ho, wo, _] = dout.dims4("avgpool grad").expect("avgpool grad rank");
    let inv = 1.0 / (window * window) as f32;
    let g = dout.data();
    let mut dx = vec![0.0f32; n * h * w * c];
    for img in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let src = ((img * ho + oy) * wo + ox) * c;
                for ky in 0..window {
                    for kx in 0..window {
                        let d = ((img * h + oy * stride + ky) * w + ox * stride + kx) * c;
                        for ch in 0..c {
                            dx[d + ch] += g[src + ch] * inv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new([n, h, w, c], dx).expect("avgpool grad shape")
}

pub fn maxpool2d(x: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let [n, h, w, c] = x.dims4("maxpool2d input")?;
    let ho = conv_out_dim(h, window, stride, 0)?;
    let wo = conv_out_dim(w, window, stride, 0)?;
    let src = x.data();
    let mut out = vec![0.0f32; n * ho * wo * c];
    for img in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let dst = ((img * ho + oy) * wo + ox) * c;
                for ch in 0..c {
                    let mut best = f32::NEG_INFINITY;
                    for ky in 0..window {
                        for kx in 0..window {
                            let s =
                                ((img * h + oy * stride + ky) * w + ox * stride + kx) * c + ch;
                            if src[s] > best {
                                best = src[s];
                            }
                        }
                    }
                    out[dst + ch] = best;
                }
            }
        }
    }
    Tensor::new([n, ho, wo, c], out)
}

/// Gradient of `maxpool2d`; ties go to the first window position scanned
/// (row-major), matching the forward pass's strict `>` comparison.
pub fn maxpool2d_backward(x: &Tensor, window: usize, stride: usize, dout: &Tensor) -> Tensor {
    let [n, h, w, c] = x.dims4("maxpool input").expect("maxpool input rank");
    let [_, ho, wo, _] = dout.dims4("maxpool grad").expect("maxpool grad rank");
    let src = x.data();
    let g = dout.data();
    let mut dx = vec![0.0f32; n * h * w * c];
    for img in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let dst = ((img * ho + oy) * wo + ox) * c;
                for ch in 0..c {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..window {
                        for kx in 0..window {
                            let s =
                                ((img * h + oy * stride + ky) * w + ox * stride + kx) * c + ch;
                            if src[s] > best {
                                best = src[s];
                                best_idx = s;
                            }
                        }
                    }
                    dx[best_idx] += g[dst + ch];
                }
            }
        }
    }
    Tensor::new([n, h, w, c], dx).expect("maxpool grad shape")
}

/// Mean over the full spatial extent: `[n, h, w, c]` -> `[n, 1, 1, c]`.
pub fn global_avgpool(x: &Tensor) -> Result<Tensor> {
    let [n, h, w, c] = x.dims4("global_avgpool input")?;
    let src = x.data();
    let mut out = vec![0.0f32; n * c];
    let inv = 1.0 / (h * w) as f64;
    for img in 0..n {
        for ch in 0..c {
            let mut acc = 0.0f64;
            for px in 0..h * w {
                acc += src[(img * h * w + px) * c + ch] as f64;
            }
            out[img * c + ch] = (acc * inv) as f32;
        }
    }
    Tensor::new([n, 1, 1, c], out)
}

pub fn global_avgpool_backward(x_shape: &[usize], dout: &Tensor) -> Tensor {
    let (n, h, w, c) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let inv = 1.0 / (h * w) as f32;
    let g = dout.data();
    let mut dx = vec![0.0f32; n * h * w * c];
    for img in 0..n {
        for px in 0..h * w {
            for ch in 0..c {
                dx[(img * h * w + px) * c + ch] = g[img * c + ch] * inv;
            }
        }
    }
    Tensor::new([n, h, w, c], dx).expect("global avgpool grad shape")
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Fully connected layer. The input is flattened to `[n, d_in]`; `weight` is
/// `[d_in, d_out]`, `bias` is `[d_out]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = x.shape().first().copied().unwrap_or(0);
    let d_in_actual = x.len().checked_div(n).unwrap_or(0);
    let [d_in, d_out] = weight.dims2("linear weight")?;
    if d_in_actual != d_in {
        return Err(Error::ShapeMismatch {
            op: "linear",
            left: format!("flattened input dim {d_in_actual}"),
            right: format!("weight rows {d_in}"),
        });
    }
    if bias.dims1("linear bias")? != d_out {
        return Err(Error::ShapeMismatch {
            op: "linear",
            left: format!("weight cols {d_out}"),
            right: format!("bias length {}", bias.len()),
        });
    }
    let mut out = vec![0.0f32; n * d_out];
    matmul(n, d_in, d_out, x.data(), weight.data(), &mut out);
    let b = bias.data();
    for row in out.chunks_mut(d_out) {
        for (o, bv) in row.iter_mut().zip(b) {
            *o += bv;
        }
    }
    Tensor::new([n, d_out], out)
}

/// Gradients of `linear` w.r.t. input (in its original shape), weight, bias.
pub fn linear_backward(
    x: &Tensor,
    weight: &Tensor,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let n = x.shape()[0];
    let [d_in, d_out] = weight.dims2("linear weight")?;

    let mut dx = vec![0.0f32; n * d_in];
    matmul_a_bt(n, d_out, d_in, dout.data(), weight.data(), &mut dx);

    let mut dw = vec![0.0f32; d_in * d_out];
    matmul_at_b(n, d_in, d_out, x.data(), dout.data(), &mut dw);

    let mut db = vec![0.0f64; d_out];
    for row in dout.data().chunks(d_out) {
        for (acc, g) in db.iter_mut().zip(row) {
            *acc += *g as f64;
        }
    }
    let db: Vec<f32> = db.into_iter().map(|v| v as f32).collect();

    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new([d_in, d_out], dw)?,
        Tensor::new([d_out], db)?,
    ))
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Batch statistics produced by a train-mode batch-norm pass. `sigma` is the
/// stabilized standard deviation `sqrt(var + BN_STABILIZER)`; `var` is the raw
/// biased batch variance.
#[derive(Clone, Debug)]
pub struct BnBatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub sigma: Vec<f32>,
}

/// Eval-mode batch norm: `(x - μ)/σ · γ + β` per channel with stored stats.
pub fn batchnorm_eval(
    x: &Tensor,
    mu: &Tensor,
    sigma: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
) -> Result<Tensor> {
    let [_, _, _, c] = x.dims4("batchnorm input")?;
    for (name, t) in [("mu", mu), ("sigma", sigma), ("gamma", gamma), ("beta", beta)] {
        if t.dims1("batchnorm param")? != c {
            return Err(Error::ShapeMismatch {
                op: "batchnorm",
                left: format!("input channels {c}"),
                right: format!("{name} length {}", t.len()),
            });
        }
    }
    if let Some(bad) = sigma.data().iter().find(|s| **s <= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "batchnorm eval requires positive sigma, found {bad}"
        )));
    }
    let (m, s, g, b) = (mu.data(), sigma.data(), gamma.data(), beta.data());
    let out = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let ch = i % c;
            (v - m[ch]) / s[ch] * g[ch] + b[ch]
        })
        .collect();
    Tensor::new(x.shape(), out)
}

/// Train-mode batch norm: normalize with the current batch's statistics.
pub fn batchnorm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(Tensor, BnBatchStats)> {
    let [n, h, w, c] = x.dims4("batchnorm input")?;
    for (name, t) in [("gamma", gamma), ("beta", beta)] {
        if t.dims1("batchnorm param")? != c {
            return Err(Error::ShapeMismatch {
                op: "batchnorm",
                left: format!("input channels {c}"),
                right: format!("{name} length {}", t.len()),
            });
        }
    }
    let m = n * h * w;
    if m == 0 {
        return Err(Error::InvalidArgument(
            "batchnorm train needs a non-empty batch".into(),
        ));
    }
    let src = x.data();
    let inv_m = 1.0f64 / m as f64;

    let mut mean = vec![0.0f64; c];
    for px in 0..m {
        for ch in 0..c {
            mean[ch] += src[px * c + ch] as f64;
        }
    }
    for v in mean.iter_mut() {
        *v *= inv_m;
    }
    let mut var = vec![0.0f64; c];
    for px in 0..m {
        for ch in 0..c {
            let d = src[px * c + ch] as f64 - mean[ch];
            var[ch] += d * d;
        }
    }
    for v in var.iter_mut() {
        *v *= inv_m;
    }
    let mean_f: Vec<f32> = mean.iter().map(|v| *v as f32).collect();
    let var_f: Vec<f32> = var.iter().map(|v| *v as f32).collect();
    let sigma_f: Vec<f32> = var_f
        .iter()
        .map(|v| (v + BN_STABILIZER).sqrt())
        .collect();

    let (g, b) = (gamma.data(), beta.data());
    let out = src
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let ch = i % c;
            (v - mean_f[ch]) / sigma_f[ch] * g[ch] + b[ch]
        })
        .collect();
    Ok((
        Tensor::new(x.shape(), out)?,
        BnBatchStats {
            mean: mean_f,
            var: var_f,
            sigma: sigma_f,
        },
    ))
}

/// Gradients of train-mode batch norm w.r.t. input, gamma, beta. Gradients
/// flow through the batch statistics.
pub fn batchnorm_train_backward(
    x: &Tensor,
    gamma: &Tensor,
    stats: &BnBatchStats,
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [n, h, w, c] = x.dims4("batchnorm input").expect("batchnorm input rank");
    let m = n * h * w;
    let inv_m = 1.0f64 / m as f64;
    let src = x.data();
    let g = dout.data();

    // dbeta = Σ g, dgamma = Σ g·x̂
    let mut dbeta = vec![0.0f64; c];
    let mut dgamma = vec![0.0f64; c];
    for px in 0..m {
        for ch in 0..c {
            let xhat = ((src[px * c + ch] - stats.mean[ch]) / stats.sigma[ch]) as f64;
            let gv = g[px * c + ch] as f64;
            dbeta[ch] += gv;
            dgamma[ch] += gv * xhat;
        }
    }

    // dx = γ/σ · (g − mean(g) − x̂ · mean(g·x̂))
    let gamma_d = gamma.data();
    let mut dx = vec![0.0f32; m * c];
    for px in 0..m {
        for ch in 0..c {
            let xhat = ((src[px * c + ch] - stats.mean[ch]) / stats.sigma[ch]) as f64;
            let gv = g[px * c + ch] as f64;
            let v = (gamma_d[ch] as f64 / stats.sigma[ch] as f64)
                * (gv - dbeta[ch] * inv_m - xhat * dgamma[ch] * inv_m);
            dx[px * c + ch] = v as f32;
        }
    }

    let dgamma: Vec<f32> = dgamma.into_iter().map(|v| v as f32).collect();
    let dbeta: Vec<f32> = dbeta.into_iter().map(|v| v as f32).collect();
    (
        Tensor::new(x.shape(), dx).expect("bn grad shape"),
        Tensor::new([c], dgamma).expect("bn gamma grad shape"),
        Tensor::new([c], dbeta).expect("bn beta grad shape"),
    )
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy
// ---------------------------------------------------------------------------

/// Mean negative log-likelihood of the labels under row-wise softmax.
/// Returns the scalar loss and the softmax probabilities (saved for backward).
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(Tensor, Tensor)> {
    let [n, k] = logits.dims2("softmax_xent logits")?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "softmax_xent",
            left: format!("{n} logit rows"),
            right: format!("{} labels", labels.len()),
        });
    }
    if let Some(bad) = labels.iter().find(|l| **l >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let src = logits.data();
    let mut probs = vec![0.0f32; n * k];
    let mut loss = 0.0f64;
    for (row, &label) in labels.iter().enumerate() {
        let r = &src[row * k..(row + 1) * k];
        let max = r.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f64;
        for &v in r {
            denom += ((v - max) as f64).exp();
        }
        for (j, &v) in r.iter().enumerate() {
            probs[row * k + j] = (((v - max) as f64).exp() / denom) as f32;
        }
        loss -= (v_sub_logsumexp(r[label], max, denom)) as f64;
    }
    let loss = (loss / n as f64) as f32;
    Ok((Tensor::scalar(loss), Tensor::new([n, k], probs)?))
}

fn v_sub_logsumexp(v: f32, max: f32, denom: f64) -> f32 {
    ((v - max) as f64 - denom.ln()) as f32
}

/// Gradient of `softmax_xent` w.r.t. the logits.
pub fn softmax_xent_backward(probs: &Tensor, labels: &[usize], dloss: f32) -> Tensor {
    let [n, k] = probs.dims2("softmax probs").expect("softmax probs rank");
    let scale = dloss / n as f32;
    let mut dx = probs.to_vec();
    for (row, &label) in labels.iter().enumerate() {
        dx[row * k + label] -= 1.0;
    }
    for v in dx.iter_mut() {
        *v *= scale;
    }
    Tensor::new([n, k], dx).expect("softmax grad shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct sextuple-loop convolution used as the independent oracle.
    fn conv2d_nested_loops(x: &Tensor, k: &Tensor, stride: usize, padding: usize) -> Tensor {
        let [n, h, w, c_in] = x.dims4("oracle x").unwrap();
        let [u, v, _, c_out] = k.dims4("oracle k").unwrap();
        let ho = (h + 2 * padding - u) / stride + 1;
        let wo = (w + 2 * padding - v) / stride + 1;
        let xs = x.data();
        let ks = k.data();
        let mut out = vec![0.0f32; n * ho * wo * c_out];
        for img in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    for j in 0..c_out {
                        let mut acc = 0.0f32;
                        for ky in 0..u {
                            for kx in 0..v {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                for ch in 0..c_in {
                                    let xv = xs[((img * h + iy as usize) * w + ix as usize)
                                        * c_in
                                        + ch];
                                    let kv = ks[((ky * v + kx) * c_in + ch) * c_out + j];
                                    acc += xv * kv;
                                }
                            }
                        }
                        out[((img * ho + oy) * wo + ox) * c_out + j] = acc;
                    }
                }
            }
        }
        Tensor::new([n, ho, wo, c_out], out).unwrap()
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::uniform([1, 5, 5, 1], -1.0, 1.0, &mut rng);
        let k = Tensor::new([1, 1, 1, 1], vec![1.0]).unwrap();
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_zero_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform([2, 4, 4, 3], -1.0, 1.0, &mut rng);
        let k = Tensor::zeros([3, 3, 3, 2]);
        let y = conv2d(&x, &k, 1, 1).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conv2d_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // The spec-level case: 4x4x2 input, 3x3x2x3 kernel, stride 1, pad 1.
        let x = Tensor::uniform([1, 4, 4, 2], -1.0, 1.0, &mut rng);
        let k = Tensor::uniform([3, 3, 2, 3], -1.0, 1.0, &mut rng);
        let got = conv2d(&x, &k, 1, 1).unwrap();
        let want = conv2d_nested_loops(&x, &k, 1, 1);
        assert!(got.max_abs_diff(&want) <= 1e-5);
    }

    #[test]
    fn conv2d_matches_oracle_on_shape_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (h, w, c_in, c_out, u, stride, pad) in [
            (8, 8, 4, 3, 3, 1, 1),
            (8, 8, 4, 2, 3, 1, 0),
            (7, 7, 2, 4, 3, 2, 1),
            (6, 5, 3, 2, 1, 1, 0),
            (8, 6, 1, 5, 3, 1, 2),
            (5, 5, 4, 4, 5, 2, 2),
        ] {
            let x = Tensor::uniform([2, h, w, c_in], -1.0, 1.0, &mut rng);
            let k = Tensor::uniform([u, u, c_in, c_out], -1.0, 1.0, &mut rng);
            let got = conv2d(&x, &k, stride, pad).unwrap();
            let want = conv2d_nested_loops(&x, &k, stride, pad);
            assert!(
                got.max_abs_diff(&want) <= 1e-5,
                "mismatch at h={h} w={w} c_in={c_in} c_out={c_out} u={u} s={stride} p={pad}"
            );
        }
    }

    #[test]
    fn conv2d_rejects_bad_shapes() {
        let x = Tensor::zeros([1, 4, 4, 2]);
        let k = Tensor::zeros([3, 3, 3, 2]);
        match conv2d(&x, &k, 1, 1) {
            Err(Error::ShapeMismatch { op, .. }) => assert_eq!(op, "conv2d"),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
        // 4 + 2*0 - 3 = 1 not divisible by stride 2.
        let k = Tensor::zeros([3, 3, 2, 2]);
        assert!(conv2d(&x, &k, 2, 0).is_err());
    }

    #[test]
    fn batchnorm_eval_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform([1, 3, 3, 2], -1.0, 1.0, &mut rng);
        let id = batchnorm_eval(
            &x,
            &Tensor::zeros([2]),
            &Tensor::full([2], 1.0),
            &Tensor::full([2], 1.0),
            &Tensor::zeros([2]),
        )
        .unwrap();
        assert_eq!(id.data(), x.data());

        let c5 = batchnorm_eval(
            &x,
            &Tensor::zeros([2]),
            &Tensor::full([2], 1.0),
            &Tensor::zeros([2]),
            &Tensor::full([2], 5.0),
        )
        .unwrap();
        assert!(c5.data().iter().all(|v| *v == 5.0));
    }

    #[test]
    fn batchnorm_eval_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform([2, 4, 4, 3], -2.0, 2.0, &mut rng);
        let mu = Tensor::uniform([3], 0.5, 1.5, &mut rng);
        let sigma = Tensor::uniform([3], 0.5, 1.5, &mut rng);
        let gamma = Tensor::uniform([3], 0.5, 1.5, &mut rng);
        let beta = Tensor::uniform([3], 0.5, 1.5, &mut rng);
        let got = batchnorm_eval(&x, &mu, &sigma, &gamma, &beta).unwrap();
        for (i, v) in x.data().iter().enumerate() {
            let ch = i % 3;
            let want =
                (v - mu.data()[ch]) / sigma.data()[ch] * gamma.data()[ch] + beta.data()[ch];
            assert!((got.data()[i] - want).abs() <= 1e-6);
        }
    }

    #[test]
    fn batchnorm_eval_rejects_nonpositive_sigma() {
        let x = Tensor::zeros([1, 2, 2, 1]);
        let bad = batchnorm_eval(
            &x,
            &Tensor::zeros([1]),
            &Tensor::zeros([1]),
            &Tensor::full([1], 1.0),
            &Tensor::zeros([1]),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn batchnorm_train_normalizes_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::uniform([4, 3, 3, 2], -3.0, 5.0, &mut rng);
        let (y, stats) = batchnorm_train(&x, &Tensor::full([2], 1.0), &Tensor::zeros([2])).unwrap();
        let m = (4 * 3 * 3) as f64;
        for ch in 0..2 {
            let mean: f64 = y
                .data()
                .iter()
                .enumerate()
                .filter(|(i, _)| i % 2 == ch)
                .map(|(_, v)| *v as f64)
                .sum::<f64>()
                / m;
            assert!(mean.abs() < 1e-5, "channel {ch} mean {mean}");
            assert!(stats.sigma[ch] > 0.0);
        }
    }

    #[test]
    fn softmax_xent_uniform_logits() {
        let logits = Tensor::zeros([2, 4]);
        let (loss, probs) = softmax_xent(&logits, &[0, 3]).unwrap();
        assert!((loss.item().unwrap() - (4.0f32).ln()).abs() < 1e-6);
        assert!(probs.data().iter().all(|p| (p - 0.25).abs() < 1e-6));
    }

    #[test]
    fn maxpool_and_avgpool_small_case() {
        let x = Tensor::new(
            [1, 2, 2, 1],
            vec![1.0, 2.0, 3.0, 4.0],
        )
        .unwrap();
        let mx = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(mx.data(), &[4.0]);
        let av = avgpool2d(&x, 2, 2).unwrap();
        assert_eq!(av.data(), &[2.5]);
        let ga = global_avgpool(&x).unwrap();
        assert_eq!(ga.data(), &[2.5]);
    }

    #[test]
    fn concat_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::uniform([2, 3, 3, 2], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform([2, 3, 3, 3], -1.0, 1.0, &mut rng);
        let cat = concat_channels(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(cat.shape(), &[2, 3, 3, 5]);
        let parts = concat_channels_backward(&cat, &[2, 3]);
        assert_eq!(parts[0], a.reshape([2, 3, 3, 2]).unwrap());
        assert_eq!(parts[1].data(), b.data());
    }

    #[test]
    fn linear_matches_manual() {
        let x = Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = Tensor::new([3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::new([2], vec![0.5, -0.5]).unwrap();
        let y = linear(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[1.0 + 3.0 + 0.5, 2.0 + 3.0 - 0.5, 4.0 + 6.0 + 0.5, 5.0 + 6.0 - 0.5]);
    }
}
