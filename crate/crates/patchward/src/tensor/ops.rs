//! Differentiable operations: forward passes plus analytic backward passes.
//!
//! Every backward here is covered by the finite-difference harness in
//! [`crate::tensor::gradcheck`].

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Matrix product of `a` (M×K) and `b` (K×N).
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::Dimension(format!(
            "matmul expects rank-2 tensors, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner dimensions disagree: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let bd = b.data();
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (kk, &aik) in arow.iter().enumerate().take(k) {
            let brow = &bd[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aik * brow[j];
            }
        }
    }
    Ok(out)
}

/// Gradients of `matmul`: dA = dC·Bᵀ, dB = Aᵀ·dC.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let da = matmul(grad_out, &b.transpose2()?)?;
    let db = matmul(&a.transpose2()?, grad_out)?;
    Ok((da, db))
}

/// Add a bias row vector (length D) to every row of `x` (R×D).
pub fn add_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 || bias.rank() != 1 || x.shape()[1] != bias.shape()[0] {
        return Err(Error::Dimension(format!(
            "add_bias: {:?} with bias {:?}",
            x.shape(),
            bias.shape()
        )));
    }
    let mut out = x.clone();
    let d = bias.shape()[0];
    let bd = bias.data();
    for r in 0..x.shape()[0] {
        let row = out.row_mut(r);
        for j in 0..d {
            row[j] = row[j] + bd[j];
        }
    }
    Ok(out)
}

/// Bias gradient of `add_bias` (column sums of `grad_out`); the input
/// gradient is `grad_out` itself.
pub fn bias_grad<T: Scalar>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.rank() != 2 {
        return Err(Error::Dimension("bias_grad expects rank 2".into()));
    }
    let (r, d) = (grad_out.shape()[0], grad_out.shape()[1]);
    let mut out = Tensor::zeros(&[d]);
    for i in 0..r {
        let row = grad_out.row(i);
        for j in 0..d {
            out.data_mut()[j] = out.data_mut()[j] + row[j];
        }
    }
    Ok(out)
}

fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if kernel > padded {
        return Err(Error::Dimension(format!(
            "kernel size {kernel} exceeds padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// 2-D convolution (cross-correlation) of a single image.
///
/// `x` is C×H×W, `kernel` is F×C×kh×kw, zero padding. Output is F×H'×W'
/// with H' = floor((H + 2·pad − kh)/stride) + 1.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    if x.rank() != 3 || kernel.rank() != 4 {
        return Err(Error::Dimension(format!(
            "conv2d expects C×H×W input and F×C×kh×kw kernel, got {:?} and {:?}",
            x.shape(),
            kernel.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be positive".into()));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (f, kc, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if kc != c {
        return Err(Error::Dimension(format!(
            "conv2d channel mismatch: input {:?} vs kernel {:?}",
            x.shape(),
            kernel.shape()
        )));
    }
    let oh = conv_out_dim(h, kh, stride, pad)?;
    let ow = conv_out_dim(w, kw, stride, pad)?;
    let mut out = Tensor::zeros(&[f, oh, ow]);
    for fo in 0..f {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ci in 0..c {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc = acc
                                + x.at3(ci, iy as usize, ix as usize)
                                    * kernel.data()[((fo * c + ci) * kh + ky) * kw + kx];
                        }
                    }
                }
                out.set3(fo, oy, ox, acc);
            }
        }
    }
    Ok(out)
}

/// Gradients of `conv2d` with respect to the input and the kernel.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (f, _, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    let (oh, ow) = (grad_out.shape()[1], grad_out.shape()[2]);
    let mut dx = Tensor::zeros(&[c, h, w]);
    let mut dk = Tensor::zeros(kernel.shape());
    for fo in 0..f {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out.at3(fo, oy, ox);
                if g == T::zero() {
                    continue;
                }
                for ci in 0..c {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let kidx = ((fo * c + ci) * kh + ky) * kw + kx;
                            let xv = x.at3(ci, iy as usize, ix as usize);
                            dx.set3(
                                ci,
                                iy as usize,
                                ix as usize,
                                dx.at3(ci, iy as usize, ix as usize) + g * kernel.data()[kidx],
                            );
                            dk.data_mut()[kidx] = dk.data_mut()[kidx] + g * xv;
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dk))
}

/// Per-channel bias add for a C×H×W tensor.
pub fn add_channel_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 3 || bias.rank() != 1 || bias.shape()[0] != x.shape()[0] {
        return Err(Error::Dimension(format!(
            "add_channel_bias: {:?} with bias {:?}",
            x.shape(),
            bias.shape()
        )));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = x.clone();
    for ci in 0..c {
        let b = bias.data()[ci];
        for i in 0..h * w {
            out.data_mut()[ci * h * w + i] = out.data_mut()[ci * h * w + i] + b;
        }
    }
    Ok(out)
}

/// Per-channel bias gradient: spatial sums of `grad_out`.
pub fn channel_bias_grad<T: Scalar>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.rank() != 3 {
        return Err(Error::Dimension("channel_bias_grad expects rank 3".into()));
    }
    let (c, h, w) = (grad_out.shape()[0], grad_out.shape()[1], grad_out.shape()[2]);
    let mut out = Tensor::zeros(&[c]);
    for ci in 0..c {
        let mut acc = T::zero();
        for i in 0..h * w {
            acc = acc + grad_out.data()[ci * h * w + i];
        }
        out.data_mut()[ci] = acc;
    }
    Ok(out)
}

/// Layer normalization over the last dimension with affine parameters.
///
/// Uses population variance; `eps` keeps the zero-variance case finite.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| Error::Dimension("layer_norm on rank-0 tensor".into()))?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::Dimension(format!(
            "layer_norm affine params {:?}/{:?} do not match last dim {d}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let rows = x.len() / d;
    let mut out = x.clone();
    let inv_d = T::one() / T::from_f64(d as f64);
    for r in 0..rows {
        let row = &mut out.data_mut()[r * d..(r + 1) * d];
        let mean = row.iter().fold(T::zero(), |acc, &v| acc + v) * inv_d;
        let var = row
            .iter()
            .fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean))
            * inv_d;
        let inv_std = T::one() / (var + eps).sqrt();
        for j in 0..d {
            let xhat = (row[j] - mean) * inv_std;
            row[j] = gamma.data()[j] * xhat + beta.data()[j];
        }
    }
    Ok(out)
}

/// Gradients of `layer_norm` w.r.t. input, gamma, and beta.
pub fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    eps: T,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if x.shape() != grad_out.shape() {
        return Err(Error::Dimension(format!(
            "layer_norm_backward shapes {:?} vs {:?}",
            x.shape(),
            grad_out.shape()
        )));
    }
    let d = *x.shape().last().unwrap();
    let rows = x.len() / d;
    let inv_d = T::one() / T::from_f64(d as f64);
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[d]);
    let mut dbeta = Tensor::zeros(&[d]);
    for r in 0..rows {
        let xr = &x.data()[r * d..(r + 1) * d];
        let gr = &grad_out.data()[r * d..(r + 1) * d];
        let mean = xr.iter().fold(T::zero(), |acc, &v| acc + v) * inv_d;
        let var = xr
            .iter()
            .fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean))
            * inv_d;
        let inv_std = T::one() / (var + eps).sqrt();

        // dL/dxhat_j = g_j·gamma_j; dx via the standard layer-norm identity.
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..d {
            let xhat = (xr[j] - mean) * inv_std;
            let dxhat = gr[j] * gamma.data()[j];
            sum_dxhat = sum_dxhat + dxhat;
            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
            dgamma.data_mut()[j] = dgamma.data_mut()[j] + gr[j] * xhat;
            dbeta.data_mut()[j] = dbeta.data_mut()[j] + gr[j];
        }
        for j in 0..d {
            let xhat = (xr[j] - mean) * inv_std;
            let dxhat = gr[j] * gamma.data()[j];
            dx.data_mut()[r * d + j] =
                inv_std * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// Row-wise softmax of a rank-2 tensor, numerically stabilized.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::Dimension("softmax_rows expects rank 2".into()));
    }
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let mut out = x.clone();
    for i in 0..r {
        let row = &mut out.data_mut()[i * c..(i + 1) * c];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(out)
}

/// Cached intermediates of a multi-head attention forward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    heads: usize,
    /// Softmax attention weights per head, each L×L.
    weights: Vec<Tensor<T>>,
}

fn head_slice<T: Scalar>(x: &Tensor<T>, head: usize, dh: usize) -> Tensor<T> {
    let l = x.shape()[0];
    let d = x.shape()[1];
    let mut out = Tensor::zeros(&[l, dh]);
    for i in 0..l {
        for j in 0..dh {
            out.data_mut()[i * dh + j] = x.data()[i * d + head * dh + j];
        }
    }
    out
}

fn head_scatter_add<T: Scalar>(target: &mut Tensor<T>, part: &Tensor<T>, head: usize, dh: usize) {
    let l = target.shape()[0];
    let d = target.shape()[1];
    for i in 0..l {
        for j in 0..dh {
            target.data_mut()[i * d + head * dh + j] =
                target.data()[i * d + head * dh + j] + part.data()[i * dh + j];
        }
    }
}

/// Multi-head scaled dot-product attention over already-projected q, k, v
/// (each L×D). Heads are contiguous slices of the feature dimension.
pub fn attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, AttentionCache<T>)> {
    if q.rank() != 2 || k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::Dimension(format!(
            "attention expects equal L×D q/k/v, got {:?}/{:?}/{:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let d = q.shape()[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "feature dimension {d} not divisible by {heads} heads"
        )));
    }
    let l = q.shape()[0];
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut out = Tensor::zeros(&[l, d]);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = head_slice(q, h, dh);
        let kh = head_slice(k, h, dh);
        let vh = head_slice(v, h, dh);
        let scores = matmul(&qh, &kh.transpose2()?)?.scale(scale);
        let w = softmax_rows(&scores)?;
        let oh = matmul(&w, &vh)?;
        head_scatter_add(&mut out, &oh, h, dh);
        weights.push(w);
    }
    Ok((
        out,
        AttentionCache {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            heads,
            weights,
        },
    ))
}

/// Gradients of `attention` w.r.t. q, k, v.
pub fn attention_backward<T: Scalar>(
    cache: &AttentionCache<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let d = cache.q.shape()[1];
    let heads = cache.heads;
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut dq = Tensor::zeros(cache.q.shape());
    let mut dk = Tensor::zeros(cache.k.shape());
    let mut dv = Tensor::zeros(cache.v.shape());
    for h in 0..heads {
        let qh = head_slice(&cache.q, h, dh);
        let kh = head_slice(&cache.k, h, dh);
        let vh = head_slice(&cache.v, h, dh);
        let w = &cache.weights[h];
        let go = head_slice(grad_out, h, dh);

        // O = W·V
        let dw = matmul(&go, &vh.transpose2()?)?;
        let dvh = matmul(&w.transpose2()?, &go)?;

        // softmax backward per row: dS_ij = W_ij·(dW_ij − Σ_k dW_ik·W_ik)
        let l = w.shape()[0];
        let mut ds = Tensor::zeros(&[l, l]);
        for i in 0..l {
            let wrow = w.row(i);
            let dwrow = dw.row(i);
            let dot = wrow
                .iter()
                .zip(dwrow)
                .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            for j in 0..l {
                ds.data_mut()[i * l + j] = wrow[j] * (dwrow[j] - dot);
            }
        }

        // S = scale·Q·Kᵀ
        let dqh = matmul(&ds, &kh)?.scale(scale);
        let dkh = matmul(&ds.transpose2()?, &qh)?.scale(scale);
        head_scatter_add(&mut dq, &dqh, h, dh);
        head_scatter_add(&mut dk, &dkh, h, dh);
        head_scatter_add(&mut dv, &dvh, h, dh);
    }
    Ok((dq, dk, dv))
}

/// Mean cross-entropy over a batch of logits (B×C) with integer labels.
///
/// Returns the scalar loss and the logits gradient `(softmax − onehot)/B`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 {
        return Err(Error::Dimension(
            "softmax_cross_entropy expects B×C logits".into(),
        ));
    }
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::Input(format!(
            "batch size {b} but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let probs = softmax_rows(logits)?;
    let inv_b = T::one() / T::from_f64(b as f64);
    let mut loss = T::zero();
    let mut grad = probs.clone();
    for (i, &label) in labels.iter().enumerate() {
        // -log softmax via stabilized log-sum-exp on the original logits.
        let row = logits.row(i);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = row
            .iter()
            .fold(T::zero(), |acc, &v| acc + (v - max).exp())
            .ln()
            + max;
        loss = loss + (lse - row[label]);
        let grow = grad.row_mut(i);
        grow[label] = grow[label] - T::one();
        for g in grow.iter_mut() {
            *g = *g * inv_b;
        }
    }
    Ok((loss * inv_b, grad))
}

/// GELU with the tanh approximation:
/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    x.map(|v| {
        let inner = c * (v + a * v * v * v);
        half * v * (T::one() + inner.tanh())
    })
}

/// Derivative of the tanh-approximation GELU, applied to `grad_out`.
pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    x.zip(grad_out, |v, g| {
        let inner = c * (v + a * v * v * v);
        let t = inner.tanh();
        let sech2 = T::one() - t * t;
        let d = half * (T::one() + t) + half * v * sech2 * c * (T::one() + three * a * v * v);
        g * d
    })
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip(grad_out, |v, g| if v > T::zero() { g } else { T::zero() })
}

/// 2×2 max pooling with stride 2 on a C×H×W tensor (H, W even).
/// Returns the pooled tensor and the flat argmax index per output cell.
pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    if x.rank() != 3 {
        return Err(Error::Dimension("max_pool2 expects C×H×W".into()));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "max_pool2 needs even spatial dims, got {h}×{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let mut argmax = vec![0usize; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let iy = oy * 2 + dy;
                        let ix = ox * 2 + dx;
                        let idx = (ci * h + iy) * w + ix;
                        let v = x.data()[idx];
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                out.set3(ci, oy, ox, best);
                argmax[(ci * oh + oy) * ow + ox] = best_idx;
            }
        }
    }
    Ok((out, argmax))
}

/// Backward of `max_pool2`: routes each output gradient to its argmax.
pub fn max_pool2_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut dx = Tensor::zeros(input_shape);
    if argmax.len() != grad_out.len() {
        return Err(Error::Dimension(
            "max_pool2_backward argmax/grad length mismatch".into(),
        ));
    }
    for (i, &src) in argmax.iter().enumerate() {
        dx.data_mut()[src] = dx.data_mut()[src] + grad_out.data()[i];
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t<T: Scalar>(shape: &[usize], vals: &[f64]) -> Tensor<T> {
        Tensor::new(
            shape.to_vec(),
            vals.iter().map(|&v| T::from_f64(v)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn matmul_identity_leaves_input() {
        let b = t::<f64>(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let id = Tensor::<f64>::eye(3);
        assert_eq!(matmul(&id, &b).unwrap(), b);
    }

    #[test]
    fn matmul_small_case() {
        let a = t::<f64>(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t::<f64>(&[2, 1], &[1.0, 1.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 2]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn conv2d_identity_kernel() {
        let x = Tensor::<f64>::full(&[1, 3, 3], 1.0);
        let k = Tensor::<f64>::full(&[1, 1, 1, 1], 1.0);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv2d_window_sums() {
        let x = Tensor::<f64>::from_fn(&[1, 4, 4], |i| i as f64);
        let k = Tensor::<f64>::full(&[1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &k, 2, 0).unwrap();
        // windows: (0,1,4,5), (2,3,6,7), (8,9,12,13), (10,11,14,15)
        assert_eq!(y.data(), &[10.0, 18.0, 42.0, 50.0]);
        assert_eq!(y.shape(), &[1, 2, 2]);
    }

    #[test]
    fn conv2d_kernel_too_large() {
        let x = Tensor::<f32>::zeros(&[1, 3, 3]);
        let k = Tensor::<f32>::zeros(&[1, 1, 5, 5]);
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap_err().category(), "dimension");
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::<f64>::full(&[1, 8], 3.5);
        let gamma = Tensor::<f64>::full(&[8], 1.0);
        let beta = Tensor::<f64>::zeros(&[8]);
        let y = layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        let x = t::<f64>(&[1, 2], &[1.0, 3.0]);
        let gamma = Tensor::<f64>::full(&[2], 1.0);
        let beta = Tensor::<f64>::zeros(&[2]);
        let y = layer_norm(&x, &gamma, &beta, 0.0).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-12);
        assert!((y.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_single_token_returns_value() {
        let q = t::<f64>(&[1, 4], &[0.3, -0.1, 0.7, 0.2]);
        let k = t::<f64>(&[1, 4], &[1.0, 2.0, 3.0, 4.0]);
        let v = t::<f64>(&[1, 4], &[5.0, 6.0, 7.0, 8.0]);
        let (out, _) = attention(&q, &k, &v, 2).unwrap();
        for (a, b) in out.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_identical_keys_values() {
        // Two identical key/value rows: softmax mixes them, but the mix of
        // identical rows is that row.
        let q = t::<f64>(&[2, 4], &[0.1, 0.2, 0.3, 0.4, -0.5, 0.5, 0.0, 1.0]);
        let k = t::<f64>(&[2, 4], &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let v = t::<f64>(&[2, 4], &[2.0, 3.0, 4.0, 5.0, 2.0, 3.0, 4.0, 5.0]);
        let (out, _) = attention(&q, &k, &v, 2).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                assert!((out.data()[i * 4 + j] - v.data()[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rejects_bad_head_count() {
        let q = Tensor::<f32>::zeros(&[2, 6]);
        let err = attention(&q, &q.clone(), &q.clone(), 4).unwrap_err();
        assert_eq!(err.category(), "config");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t::<f64>(&[2, 3], &[0.5, -2.0, 3.0, 10.0, 10.0, 10.0]);
        let s = softmax_rows(&x).unwrap();
        for i in 0..2 {
            let sum: f64 = s.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::<f64>::zeros(&[2, 10]);
        let (loss, _) = softmax_cross_entropy(&logits, &[3, 7]).unwrap();
        assert!((loss - (10.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_decreases_with_margin() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 2.0, 4.0, 8.0, 16.0] {
            let mut logits = Tensor::<f64>::zeros(&[1, 4]);
            logits.data_mut()[2] = margin;
            let (loss, _) = softmax_cross_entropy(&logits, &[2]).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = Tensor::<f32>::zeros(&[1, 4]);
        let err = softmax_cross_entropy(&logits, &[4]).unwrap_err();
        assert_eq!(err.category(), "input");
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = t::<f64>(&[1, 2, 2], &[1.0, 5.0, 2.0, 3.0]);
        let (y, argmax) = max_pool2(&x).unwrap();
        assert_eq!(y.data(), &[5.0]);
        let g = Tensor::<f64>::full(&[1, 1, 1], 2.0);
        let dx = max_pool2_backward(&[1, 2, 2], &argmax, &g).unwrap();
        assert_eq!(dx.data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn ops_are_deterministic() {
        let x = Tensor::<f32>::from_fn(&[4, 4], |i| (i as f32).sin());
        let a = matmul(&x, &x).unwrap();
        let b = matmul(&x, &x).unwrap();
        assert_eq!(a, b);
    }
}
