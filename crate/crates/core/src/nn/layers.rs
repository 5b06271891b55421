//! Forward and backward passes of every layer, written out by hand.
//!
//! Layouts: sequences are `[batch, channels, length]`, conv weights
//! `[out_ch, in_ch, kernel]`, linear weights `[out, in]`.

use super::tensor::{matmul, matmul_tn, Tensor};
use super::NnError;

/// Probabilities are clamped to this before taking logs.
pub const CE_EPSILON: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct Conv1dCache {
    pub x: Tensor,
    pub w: Tensor,
    pub stride: usize,
}

/// Valid cross-correlation with per-channel bias.
pub fn conv1d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<(Tensor, Conv1dCache), NnError> {
    let (n, c, len) = x.dims3()?;
    let (o, wc, m) = w.dims3()?;
    if wc != c {
        return Err(NnError::Shape(format!("conv expects {wc} input channels, got {c}")));
    }
    if b.shape() != [o] {
        return Err(NnError::Shape(format!("conv bias shape {:?}, expected [{o}]", b.shape())));
    }
    if stride == 0 {
        return Err(NnError::Shape("conv stride must be positive".into()));
    }
    if m > len {
        return Err(NnError::Shape(format!("kernel {m} larger than input length {len}")));
    }
    let out_len = (len - m) / stride + 1;
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0.0; n * o * out_len];
    for s in 0..n {
        for oc in 0..o {
            let dst = &mut out[(s * o + oc) * out_len..(s * o + oc + 1) * out_len];
            dst.iter_mut().for_each(|v| *v = b.data()[oc]);
            for ic in 0..c {
                let src = &xd[(s * c + ic) * len..(s * c + ic + 1) * len];
                let ker = &wd[(oc * c + ic) * m..(oc * c + ic + 1) * m];
                for (i, d) in dst.iter_mut().enumerate() {
                    let win = &src[i * stride..i * stride + m];
                    *d += win.iter().zip(ker).map(|(a, k)| a * k).sum::<f64>();
                }
            }
        }
    }
    let cache = Conv1dCache { x: x.clone(), w: w.clone(), stride };
    Ok((Tensor::from_raw(vec![n, o, out_len], out), cache))
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn conv1d_backward(grad_out: &Tensor, cache: &Conv1dCache) -> Result<(Tensor, Tensor, Tensor), NnError> {
    let (n, c, len) = cache.x.dims3()?;
    let (o, _, m) = cache.w.dims3()?;
    let out_len = (len - m) / cache.stride + 1;
    if grad_out.shape() != [n, o, out_len] {
        return Err(NnError::Shape(format!("conv grad shape {:?}, expected {:?}", grad_out.shape(), [n, o, out_len])));
    }
    let stride = cache.stride;
    let (xd, wd, gd) = (cache.x.data(), cache.w.data(), grad_out.data());
    let mut gx = vec![0.0; n * c * len];
    let mut gw = vec![0.0; o * c * m];
    let mut gb = vec![0.0; o];
    for s in 0..n {
        for oc in 0..o {
            let g = &gd[(s * o + oc) * out_len..(s * o + oc + 1) * out_len];
            gb[oc] += g.iter().sum::<f64>();
            for ic in 0..c {
                let base_x = (s * c + ic) * len;
                let base_w = (oc * c + ic) * m;
                for (i, &gv) in g.iter().enumerate() {
                    if gv == 0.0 {
                        continue;
                    }
                    let start = i * stride;
                    for j in 0..m {
                        gw[base_w + j] += gv * xd[base_x + start + j];
                        gx[base_x + start + j] += gv * wd[base_w + j];
                    }
                }
            }
        }
    }
    Ok((Tensor::from_raw(vec![n, c, len], gx), Tensor::from_raw(vec![o, c, m], gw), Tensor::from_raw(vec![o], gb)))
}

pub fn leaky_relu_forward(x: &Tensor, alpha: f64) -> Tensor {
    let data = x.data().iter().map(|&v| if v >= 0.0 { v } else { alpha * v }).collect();
    Tensor::from_raw(x.shape().to_vec(), data)
}

/// Derivative 1 for `x >= 0`, `alpha` otherwise.
pub fn leaky_relu_backward(grad_out: &Tensor, x: &Tensor, alpha: f64) -> Result<Tensor, NnError> {
    if grad_out.shape() != x.shape() {
        return Err(NnError::Shape(format!("lrelu grad {:?} vs input {:?}", grad_out.shape(), x.shape())));
    }
    let data = grad_out.data().iter().zip(x.data()).map(|(&g, &v)| if v >= 0.0 { g } else { alpha * g }).collect();
    Ok(Tensor::from_raw(x.shape().to_vec(), data))
}

#[derive(Clone, Debug)]
pub struct MaxPoolCache {
    pub in_shape: Vec<usize>,
    /// Flat input index of each output's maximum.
    pub argmax: Vec<usize>,
}

/// Non-overlapping windows; a trailing remainder is dropped and ties go to
/// the lowest index.
pub fn maxpool1d_forward(x: &Tensor, window: usize) -> Result<(Tensor, MaxPoolCache), NnError> {
    let (n, c, len) = x.dims3()?;
    if window == 0 || window > len {
        return Err(NnError::Shape(format!("pool window {window} for length {len}")));
    }
    let out_len = len / window;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * out_len);
    let mut argmax = Vec::with_capacity(n * c * out_len);
    for row in 0..n * c {
        for i in 0..out_len {
            let start = row * len + i * window;
            let mut best = start;
            for j in start + 1..start + window {
                if xd[j] > xd[best] {
                    best = j;
                }
            }
            out.push(xd[best]);
            argmax.push(best);
        }
    }
    Ok((Tensor::from_raw(vec![n, c, out_len], out), MaxPoolCache { in_shape: x.shape().to_vec(), argmax }))
}

pub fn maxpool1d_backward(grad_out: &Tensor, cache: &MaxPoolCache) -> Result<Tensor, NnError> {
    if grad_out.len() != cache.argmax.len() {
        return Err(NnError::Shape(format!("pool grad has {} entries, cache {}", grad_out.len(), cache.argmax.len())));
    }
    let mut gx = vec![0.0; cache.in_shape.iter().product()];
    for (&g, &idx) in grad_out.data().iter().zip(&cache.argmax) {
        gx[idx] += g;
    }
    Ok(Tensor::from_raw(cache.in_shape.clone(), gx))
}

/// `y = x Wᵀ + b` for `x: [n, in]`, `W: [out, in]`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
    let (n, f) = x.dims2()?;
    let (k, wf) = w.dims2()?;
    if wf != f || b.shape() != [k] {
        return Err(NnError::Shape(format!("linear x {:?}, W {:?}, b {:?}", x.shape(), w.shape(), b.shape())));
    }
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let xi = x.row(i);
        for j in 0..k {
            let wj = w.row(j);
            out[i * k + j] = b.data()[j] + xi.iter().zip(wj).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    Ok(Tensor::from_raw(vec![n, k], out))
}

/// Returns `(grad_x, grad_W, grad_b)` with `grad_W = grad_outᵀ x` summed
/// over the batch.
pub fn linear_backward(grad_out: &Tensor, x: &Tensor, w: &Tensor) -> Result<(Tensor, Tensor, Tensor), NnError> {
    let (n, k) = grad_out.dims2()?;
    let (xn, _) = x.dims2()?;
    let (wk, _) = w.dims2()?;
    if xn != n || wk != k {
        return Err(NnError::Shape(format!("linear grad {:?} with x {:?} and W {:?}", grad_out.shape(), x.shape(), w.shape())));
    }
    let gx = matmul(grad_out, w)?;
    let gw = matmul_tn(grad_out, x)?;
    let gb = (0..k).map(|j| (0..n).map(|i| grad_out.at2(i, j)).sum()).collect();
    Ok((gx, gw, Tensor::from_raw(vec![k], gb)))
}

/// Row-wise softmax with max subtraction.
pub fn softmax(z: &Tensor) -> Result<Tensor, NnError> {
    let (n, k) = z.dims2()?;
    let mut out = Vec::with_capacity(n * k);
    for i in 0..n {
        let row = z.row(i);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    Ok(Tensor::from_raw(vec![n, k], out))
}

fn check_labels(probs: &Tensor, labels: &[usize]) -> Result<(usize, usize), NnError> {
    let (n, k) = probs.dims2()?;
    if labels.len() != n {
        return Err(NnError::Shape(format!("{} labels for batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(NnError::Shape(format!("label {bad} out of range for {k} classes")));
    }
    Ok((n, k))
}

/// Mean negative log-likelihood over the batch.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64, NnError> {
    let (n, _) = check_labels(probs, labels)?;
    let total: f64 = labels.iter().enumerate().map(|(i, &y)| -probs.at2(i, y).max(CE_EPSILON).ln()).sum();
    Ok(total / n as f64)
}

/// Gradient of the mean cross entropy with respect to the softmax input:
/// `(ŷ − onehot(y)) / n`.
pub fn ce_softmax_grad(probs: &Tensor, labels: &[usize]) -> Result<Tensor, NnError> {
    let (n, k) = check_labels(probs, labels)?;
    let mut g: Vec<f64> = probs.data().to_vec();
    for (i, &y) in labels.iter().enumerate() {
        g[i * k + y] -= 1.0;
    }
    let inv = 1.0 / n as f64;
    g.iter_mut().for_each(|v| *v *= inv);
    Ok(Tensor::from_raw(vec![n, k], g))
}

pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut d = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        d[i * classes + y] = 1.0;
    }
    Tensor::from_raw(vec![labels.len(), classes], d)
}

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let (n, _) = t.dims2().expect("matrix");
    (0..n)
        .map(|i| {
            let row = t.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
