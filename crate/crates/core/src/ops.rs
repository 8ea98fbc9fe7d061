//! Forward and backward kernels over plain tensors.
//!
//! These are shared by the untraced forward pass, the traced forward pass
//! and the autodiff graph, so all three produce bit-identical values.
//! Convolutions use cross-correlation (no kernel flip); padded taps read
//! as zero.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Output extent of a strided, zero-padded window along one axis.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    let padded = input + 2 * padding;
    if kernel == 0 || padded < kernel {
        return Err(Error::shape(
            "conv",
            format!("kernel {kernel} does not fit input {input} with padding {padding}"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

fn dims4(t: &Tensor, op: &'static str) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        ref s => Err(Error::shape(op, format!("expected rank 4, got {s:?}"))),
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = match *a.shape() {
        [m, k] => (m, k),
        ref s => return Err(Error::shape("matmul", format!("lhs must be rank 2, got {s:?}"))),
    };
    let (k2, n) = match *b.shape() {
        [k2, n] => (k2, n),
        ref s => return Err(Error::shape("matmul", format!("rhs must be rank 2, got {s:?}"))),
    };
    if k != k2 {
        return Err(Error::shape("matmul", format!("inner extents {k} vs {k2}")));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::from_parts(vec![m, n], out).ensure_finite("matmul")
}

/// Gradients of `a·b` given the upstream gradient `g` (m×n).
pub fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let mut ga = vec![0.0; m * k];
    let mut gb = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let mut acc = 0.0;
            for j in 0..n {
                acc += gd[i * n + j] * bd[p * n + j];
            }
            ga[i * k + p] = acc;
        }
    }
    for i in 0..m {
        for p in 0..k {
            let aip = ad[i * k + p];
            for j in 0..n {
                gb[p * n + j] += aip * gd[i * n + j];
            }
        }
    }
    (
        Tensor::from_parts(vec![m, k], ga),
        Tensor::from_parts(vec![k, n], gb),
    )
}

/// Geometry shared by the dense and depthwise convolutions.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    /// Input coordinate read by output `o` at tap `t`, or `None` inside the padding.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + t).checked_sub(self.padding)?;
        (pos < extent).then_some(pos)
    }
}

fn conv_geom(input: &Tensor, kh: usize, kw: usize, stride: usize, padding: usize, op: &'static str) -> Result<ConvGeom> {
    let [n, c, h, w] = dims4(input, op)?;
    let oh = conv_output_extent(h, kh, stride, padding)?;
    let ow = conv_output_extent(w, kw, stride, padding)?;
    Ok(ConvGeom { n, c, h, w, oh, ow, stride, padding })
}

/// Cross-correlation of `input` (N×C×H×W) with `kernel` (F×C×kh×kw).
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let [f, kc, kh, kw] = dims4(kernel, "conv2d")?;
    let g = conv_geom(input, kh, kw, stride, padding, "conv2d")?;
    if kc != g.c {
        return Err(Error::shape("conv2d", format!("kernel has {kc} channels, input has {}", g.c)));
    }
    let (x, k) = (input.data(), kernel.data());
    let mut out = vec![0.0; g.n * f * g.oh * g.ow];
    let mut idx = 0;
    for n in 0..g.n {
        for fi in 0..f {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = 0.0;
                    for c in 0..g.c {
                        let xbase = (n * g.c + c) * g.h;
                        let kbase = (fi * g.c + c) * kh;
                        for ky in 0..kh {
                            let Some(iy) = g.src(oy, ky, g.h) else { continue };
                            for kx in 0..kw {
                                let Some(ix) = g.src(ox, kx, g.w) else { continue };
                                acc += x[(xbase + iy) * g.w + ix] * k[(kbase + ky) * kw + kx];
                            }
                        }
                    }
                    out[idx] = acc;
                    idx += 1;
                }
            }
        }
    }
    Tensor::from_parts(vec![g.n, f, g.oh, g.ow], out).ensure_finite("conv2d")
}

/// Returns `(d input, d kernel)` for [`conv2d`].
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor)> {
    let [f, _, kh, kw] = dims4(kernel, "conv2d")?;
    let g = conv_geom(input, kh, kw, stride, padding, "conv2d")?;
    let (x, k, go) = (input.data(), kernel.data(), grad_out.data());
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    let mut idx = 0;
    for n in 0..g.n {
        for fi in 0..f {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let up = go[idx];
                    idx += 1;
                    if up == 0.0 {
                        continue;
                    }
                    for c in 0..g.c {
                        let xbase = (n * g.c + c) * g.h;
                        let kbase = (fi * g.c + c) * kh;
                        for ky in 0..kh {
                            let Some(iy) = g.src(oy, ky, g.h) else { continue };
                            for kx in 0..kw {
                                let Some(ix) = g.src(ox, kx, g.w) else { continue };
                                let xi = (xbase + iy) * g.w + ix;
                                let ki = (kbase + ky) * kw + kx;
                                gx[xi] += up * k[ki];
                                gk[ki] += up * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(input.shape().to_vec(), gx),
        Tensor::from_parts(kernel.shape().to_vec(), gk),
    ))
}

fn depthwise_kernel_dims(kernel: &Tensor) -> Result<[usize; 3]> {
    match *kernel.shape() {
        [c, kh, kw] => Ok([c, kh, kw]),
        ref s => Err(Error::shape("depthwise_conv2d", format!("kernel must be C×kh×kw, got {s:?}"))),
    }
}

/// Channel-wise cross-correlation of `input` (N×C×H×W) with `kernel` (C×kh×kw).
pub fn depthwise_conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let [kc, kh, kw] = depthwise_kernel_dims(kernel)?;
    let g = conv_geom(input, kh, kw, stride, padding, "depthwise_conv2d")?;
    if kc != g.c {
        return Err(Error::shape(
            "depthwise_conv2d",
            format!("kernel has {kc} channels, input has {}", g.c),
        ));
    }
    let (x, k) = (input.data(), kernel.data());
    let mut out = vec![0.0; g.n * g.c * g.oh * g.ow];
    let mut idx = 0;
    for n in 0..g.n {
        for c in 0..g.c {
            let xbase = (n * g.c + c) * g.h;
            let kbase = c * kh;
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        let Some(iy) = g.src(oy, ky, g.h) else { continue };
                        for kx in 0..kw {
                            let Some(ix) = g.src(ox, kx, g.w) else { continue };
                            acc += x[(xbase + iy) * g.w + ix] * k[(kbase + ky) * kw + kx];
                        }
                    }
                    out[idx] = acc;
                    idx += 1;
                }
            }
        }
    }
    Tensor::from_parts(vec![g.n, g.c, g.oh, g.ow], out).ensure_finite("depthwise_conv2d")
}

/// Returns `(d input, d kernel)` for [`depthwise_conv2d`].
pub fn depthwise_conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor)> {
    let [_, kh, kw] = depthwise_kernel_dims(kernel)?;
    let g = conv_geom(input, kh, kw, stride, padding, "depthwise_conv2d")?;
    let (x, k, go) = (input.data(), kernel.data(), grad_out.data());
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    let mut idx = 0;
    for n in 0..g.n {
        for c in 0..g.c {
            let xbase = (n * g.c + c) * g.h;
            let kbase = c * kh;
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let up = go[idx];
                    idx += 1;
                    if up == 0.0 {
                        continue;
                    }
                    for ky in 0..kh {
                        let Some(iy) = g.src(oy, ky, g.h) else { continue };
                        for kx in 0..kw {
                            let Some(ix) = g.src(ox, kx, g.w) else { continue };
                            let xi = (xbase + iy) * g.w + ix;
                            let ki = (kbase + ky) * kw + kx;
                            gx[xi] += up * k[ki];
                            gk[ki] += up * x[xi];
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(input.shape().to_vec(), gx),
        Tensor::from_parts(kernel.shape().to_vec(), gk),
    ))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Passes the gradient where `x > 0`; zero at and below zero.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// Adds `bias[c]` along axis 1 of an N×C×… tensor.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 || bias.rank() != 1 || bias.len() != x.shape()[1] {
        return Err(Error::shape(
            "add_bias",
            format!("bias {:?} does not match axis 1 of {:?}", bias.shape(), x.shape()),
        ));
    }
    let c = x.shape()[1];
    let inner: usize = x.shape()[2..].iter().product();
    let b = bias.data();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v + b[(i / inner) % c])
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data).ensure_finite("add_bias")
}

pub fn add_channel_bias_backward(x_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let c = x_shape[1];
    let inner: usize = x_shape[2..].iter().product();
    let mut gb = vec![0.0; c];
    for (i, &g) in grad_out.data().iter().enumerate() {
        gb[(i / inner) % c] += g;
    }
    Tensor::from_parts(vec![c], gb)
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = dims4(x, "global_avg_pool")?;
    let area = (h * w) as f64;
    let data = x
        .data()
        .chunks_exact(h * w)
        .map(|plane| plane.iter().sum::<f64>() / area)
        .collect();
    Ok(Tensor::from_parts(vec![n, c], data))
}

pub fn global_avg_pool_backward(x_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let plane = x_shape[2] * x_shape[3];
    let area = plane as f64;
    let mut data = Vec::with_capacity(grad_out.len() * plane);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat(g / area).take(plane));
    }
    Tensor::from_parts(x_shape.to_vec(), data)
}

/// Mean softmax cross-entropy over the batch, plus the softmax probabilities
/// needed by the backward pass.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, c) = match *logits.shape() {
        [n, c] => (n, c),
        ref s => return Err(Error::shape("softmax_cross_entropy", format!("logits must be N×C, got {s:?}"))),
    };
    if labels.len() != n {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{} labels for a batch of {n}", labels.len()),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange { label, classes: c });
    }
    let mut probs = Vec::with_capacity(n * c);
    let mut total = 0.0;
    for (row, &label) in logits.data().chunks_exact(c).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_norm = sum_exp.ln();
        total += log_norm - (row[label] - max);
        probs.extend(row.iter().map(|&z| (z - max).exp() / sum_exp));
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "softmax_cross_entropy" });
    }
    Ok((loss, Tensor::from_parts(vec![n, c], probs)))
}

/// Gradient of the mean cross-entropy w.r.t. the logits, scaled by `upstream`.
pub fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[usize], upstream: f64) -> Tensor {
    let (n, c) = (probs.shape()[0], probs.shape()[1]);
    let scale = upstream / n as f64;
    let mut data = probs.data().to_vec();
    for (i, &label) in labels.iter().enumerate() {
        data[i * c + label] -= 1.0;
    }
    for v in &mut data {
        *v *= scale;
    }
    Tensor::from_parts(vec![n, c], data)
}
