//! Eager forward kernels. The autodiff graph calls these for its forward
//! values, so each primitive's math lives in exactly one place.

use crate::element::Element;
use crate::error::{shape_err, Result, TensorError};
use crate::rng::RngStream;
use crate::tensor::Tensor;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEFF: f64 = 0.044_715;

/// `[m,k] × [k,n] → [m,n]`.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(shape_err!("matmul inner dims differ: {:?} x {:?}", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), out.data_mut(), (n, 1), false);
    Ok(out)
}

fn check_finite<T: Element>(x: &Tensor<T>, what: &str) -> Result<()> {
    if x.all_finite() {
        Ok(())
    } else {
        Err(TensorError::NumericDomain(format!("{what}: non-finite input")))
    }
}

/// Numerically stable log-softmax of one row, in `f64`.
pub fn log_softmax_row<T: Element>(row: &[T]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let lse = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v.as_f64() - lse).collect()
}

fn softmax_into<T: Element>(src: &[T], stride: usize, n: usize, dst: &mut [T]) {
    let max = (0..n).fold(f64::NEG_INFINITY, |m, i| m.max(src[i * stride].as_f64()));
    let mut sum = 0.0f64;
    let mut tmp = vec![0.0f64; n];
    for (i, t) in tmp.iter_mut().enumerate() {
        *t = (src[i * stride].as_f64() - max).exp();
        sum += *t;
    }
    for (i, t) in tmp.iter().enumerate() {
        dst[i * stride] = T::of(t / sum);
    }
}

/// Softmax along `axis`, max-subtracted, accumulated in `f64`.
pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(shape_err!("softmax axis {axis} out of range for shape {:?}", x.shape()));
    }
    check_finite(x, "softmax")?;
    let n = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let mut out = Tensor::zeros(x.shape());
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let end = base + (n - 1) * inner + 1;
            softmax_into(&x.data()[base..end], inner, n, &mut out.data_mut()[base..end]);
        }
    }
    Ok(out)
}

/// Row-wise softmax over the last axis.
pub(crate) fn softmax_last<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let n = *x.shape().last().unwrap_or(&1);
    let mut out = Tensor::zeros(x.shape());
    for (src, dst) in x.data().chunks(n).zip(out.data_mut().chunks_mut(n)) {
        softmax_into(src, 1, n, dst);
    }
    out
}

/// Layer normalization over the last axis.
pub fn layer_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    layer_norm_with_stats(x, gamma, beta, eps).map(|(y, _, _)| y)
}

/// Layer norm plus the per-row mean and reciprocal std used by the backward pass.
pub(crate) fn layer_norm_with_stats<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Vec<f64>, Vec<f64>)> {
    let d = *x.shape().last().ok_or_else(|| shape_err!("layer_norm on a scalar"))?;
    if d == 0 {
        return Err(shape_err!("layer_norm over a zero-length axis"));
    }
    if gamma.len() != d || beta.len() != d {
        return Err(shape_err!(
            "layer_norm gamma/beta length {}/{} != last axis {d}",
            gamma.len(),
            beta.len()
        ));
    }
    if eps <= 0.0 {
        return Err(TensorError::Config(format!("layer_norm eps must be positive, got {eps}")));
    }
    let rows = x.len() / d;
    let mut out = Tensor::zeros(x.shape());
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for (src, dst) in x.data().chunks(d).zip(out.data_mut().chunks_mut(d)) {
        let mean = src.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
        let var = src.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            let xhat = (src[j].as_f64() - mean) * rstd;
            dst[j] = T::of(xhat * gamma.data()[j].as_f64() + beta.data()[j].as_f64());
        }
        means.push(mean);
        rstds.push(rstd);
    }
    Ok((out, means, rstds))
}

fn validate_dropout_p(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(TensorError::Config(format!("dropout probability must be in [0, 1), got {p}")))
    }
}

/// Inverted-dropout multipliers: `0` for dropped elements, `1/(1-p)` for kept ones.
pub(crate) fn dropout_mask<T: Element>(len: usize, p: f64, rng: &mut RngStream) -> Result<Vec<T>> {
    validate_dropout_p(p)?;
    let threshold = (p * 4_294_967_296.0) as u64;
    let keep = T::of(1.0 / (1.0 - p));
    Ok((0..len)
        .map(|_| if (rng.next_u32() as u64) < threshold { T::zero() } else { keep })
        .collect())
}

/// Inverted dropout. Identity when `training` is false or `p == 0`.
pub fn dropout<T: Element>(
    x: &Tensor<T>,
    p: f64,
    training: bool,
    rng: &mut RngStream,
) -> Result<Tensor<T>> {
    validate_dropout_p(p)?;
    if !training || p == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask::<T>(x.len(), p, rng)?;
    let mut out = x.clone();
    out.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v = *v * *m);
    Ok(out)
}

/// tanh-approximated GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x)).tanh())
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    let t = inner.tanh();
    let d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

pub fn gelu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(x.shape(), |i| T::of(gelu_scalar(x.data()[i].as_f64())))
}

/// Bidirectional multi-head attention: per head `softmax(q·kᵀ/√d_head)·v`,
/// heads concatenated along the feature axis.
pub fn scaled_dot_attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<Tensor<T>> {
    attention_with_probs(q, k, v, heads).map(|(out, _)| out)
}

/// Attention output plus the `[heads, tq, tk]` probability tensor.
pub(crate) fn attention_with_probs<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (tq, d) = q.dims2()?;
    let (tk, dk) = k.dims2()?;
    let (tv, dv) = v.dims2()?;
    if d != dk || d != dv || tk != tv {
        return Err(shape_err!(
            "attention shapes disagree: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::Config(format!("model dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![T::zero(); heads * tq * tk];
    let mut out = Tensor::zeros(&[tq, d]);
    let mut scores = vec![T::zero(); tq * tk];
    for h in 0..heads {
        let off = h * dh;
        T::gemm(
            tq,
            dh,
            tk,
            &q.data()[off..],
            (d, 1),
            &k.data()[off..],
            (1, d),
            &mut scores,
            (tk, 1),
            false,
        );
        let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
        for (src, dst) in scores.chunks(tk).zip(p.chunks_mut(tk)) {
            let scaled: Vec<T> = src.iter().map(|s| T::of(s.as_f64() * scale)).collect();
            if scaled.iter().any(|s| !s.is_finite()) {
                return Err(TensorError::NumericDomain("attention: non-finite scores".into()));
            }
            softmax_into(&scaled, 1, tk, dst);
        }
        T::gemm(tq, tk, dh, p, (tk, 1), &v.data()[off..], (d, 1), &mut out.data_mut()[off..], (d, 1), false);
    }
    Ok((out, probs))
}

/// Mean over consecutive groups of `factor` rows: `[frames, d] → [frames/factor, d]`.
pub fn mean_pool_time<T: Element>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (frames, d) = x.dims2()?;
    if factor == 0 || frames % factor != 0 {
        return Err(shape_err!("{frames} frames not divisible by pool factor {factor}"));
    }
    let groups = frames / factor;
    let mut out = Tensor::zeros(&[groups, d]);
    let mut acc = vec![0.0f64; d];
    for g in 0..groups {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for r in g * factor..(g + 1) * factor {
            for (a, v) in acc.iter_mut().zip(x.row(r)) {
                *a += v.as_f64();
            }
        }
        for (o, a) in out.data_mut()[g * d..(g + 1) * d].iter_mut().zip(&acc) {
            *o = T::of(a / factor as f64);
        }
    }
    Ok(out)
}

/// Unfolds `[t, c]` into `[t_out, kernel·c]` patches for a 1-D convolution
/// with zero padding; `cols[o, j·c + ch] = x[o·stride + j − pad, ch]`.
pub fn im2col<T: Element>(x: &Tensor<T>, kernel: usize, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let (t, c) = x.dims2()?;
    let t_out = conv_out_len(t, kernel, stride, pad)?;
    let mut cols = Tensor::zeros(&[t_out, kernel * c]);
    for o in 0..t_out {
        for j in 0..kernel {
            let src = (o * stride + j) as isize - pad as isize;
            if src < 0 || src as usize >= t {
                continue;
            }
            let dst = &mut cols.data_mut()[o * kernel * c + j * c..o * kernel * c + (j + 1) * c];
            dst.copy_from_slice(x.row(src as usize));
        }
    }
    Ok(cols)
}

pub fn conv_out_len(t: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 || t + 2 * pad < kernel {
        return Err(shape_err!("conv of length {t} with kernel {kernel}, stride {stride}, pad {pad}"));
    }
    Ok((t + 2 * pad - kernel) / stride + 1)
}
