//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op applied during one forward pass as a node
//! holding its output value. [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients into every node that (transitively) depends on a
//! leaf created with `requires_grad`. A graph is single-threaded; independent
//! graphs may be built in parallel.

use std::sync::Arc;

use crate::element::Element;
use crate::error::{shape_err, Result, TensorError};
use crate::kernels;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddBias { x: Var, bias: Var },
    MatMul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, means: Vec<f64>, rstds: Vec<f64> },
    Dropout { x: Var, mask: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    MeanPool { x: Var, factor: usize },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatRows(Var, Var),
    Im2Col { x: Var, kernel: usize, stride: usize, pad: usize },
    Softmax(Var),
    Sum(Var),
    /// Scalar whose partial derivatives w.r.t. `inputs` were computed alongside its value.
    Custom { inputs: Vec<Var>, partials: Vec<Vec<T>> },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value: Arc::new(value), grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.shared_leaf(Arc::new(value), requires_grad)
    }

    /// Leaf backed by an existing shared buffer (parameters avoid a copy this way).
    pub fn shared_leaf(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`], if `v` is tracked.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    fn arc(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err!("add: {:?} vs {:?}", x.shape(), y.shape()));
        }
        let out = Tensor::from_fn(x.shape(), |i| x.data()[i] + y.data()[i]);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a vector to every row (broadcast over the last axis).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let d = *xv.shape().last().unwrap_or(&1);
        if bv.len() != d {
            return Err(shape_err!("add_bias: bias {:?} vs input {:?}", bv.shape(), xv.shape()));
        }
        let out = Tensor::from_fn(xv.shape(), |i| xv.data()[i] + bv.data()[i % d]);
        Ok(self.push(out, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `x·w + b` with `w: [in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::from_fn(xv.shape(), |i| T::of(xv.data()[i].as_f64() * s));
        Ok(self.push(out, Op::Scale(x, s), &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = kernels::gelu(self.value(x));
        Ok(self.push(out, Op::Gelu(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, means, rstds) =
            kernels::layer_norm_with_stats(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, means, rstds }, &[x, gamma, beta]))
    }

    /// Inverted dropout. With `rng == None` or `p == 0` this is the identity
    /// and returns `x` itself.
    pub fn dropout(&mut self, x: Var, p: f64, rng: Option<&mut RngStream>) -> Result<Var> {
        let rng = match rng {
            Some(r) if p > 0.0 => r,
            _ => {
                if !(0.0..1.0).contains(&p) {
                    return Err(TensorError::Config(format!("dropout probability {p} not in [0, 1)")));
                }
                return Ok(x);
            }
        };
        let xv = self.value(x);
        let mask = kernels::dropout_mask::<T>(xv.len(), p, rng)?;
        let out = Tensor::from_fn(xv.shape(), |i| xv.data()[i] * mask[i]);
        Ok(self.push(out, Op::Dropout { x, mask }, &[x]))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (out, probs) =
            kernels::attention_with_probs(self.value(q), self.value(k), self.value(v), heads)?;
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }, &[q, k, v]))
    }

    pub fn mean_pool_time(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = kernels::mean_pool_time(self.value(x), factor)?;
        Ok(self.push(out, Op::MeanPool { x, factor }, &[x]))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, d) = tv.dims2()?;
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(shape_err!("embedding id {bad} out of range for {rows} rows"));
        }
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (r, &id) in ids.iter().enumerate() {
            out.data_mut()[r * d..(r + 1) * d].copy_from_slice(tv.row(id));
        }
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ra, ca) = av.dims2()?;
        let (rb, cb) = bv.dims2()?;
        if ca != cb {
            return Err(shape_err!("concat_rows: {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let out = Tensor::new(vec![ra + rb, ca], data)?;
        Ok(self.push(out, Op::ConcatRows(a, b), &[a, b]))
    }

    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::im2col(self.value(x), kernel, stride, pad)?;
        Ok(self.push(out, Op::Im2Col { x, kernel, stride, pad }, &[x]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !xv.all_finite() {
            return Err(TensorError::NumericDomain("softmax: non-finite input".into()));
        }
        let out = kernels::softmax_last(xv);
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum_f64();
        Ok(self.push(Tensor::scalar(T::of(s)), Op::Sum(x), &[x]))
    }

    /// Scalar node with caller-supplied partial derivatives, one buffer per
    /// input shaped like that input. Used for fused losses whose value and
    /// gradient are computed together.
    pub fn custom_scalar(&mut self, inputs: &[Var], value: f64, partials: Vec<Vec<T>>) -> Result<Var> {
        if inputs.len() != partials.len() {
            return Err(shape_err!("custom_scalar: {} inputs, {} partials", inputs.len(), partials.len()));
        }
        for (v, p) in inputs.iter().zip(&partials) {
            if self.value(*v).len() != p.len() {
                return Err(shape_err!(
                    "custom_scalar: partial of length {} for input {:?}",
                    p.len(),
                    self.value(*v).shape()
                ));
            }
        }
        let op = Op::Custom { inputs: inputs.to_vec(), partials };
        Ok(self.push(Tensor::scalar(T::of(value)), op, inputs))
    }

    /// Reverse pass from a single-element `loss`. Clears gradients from any
    /// previous pass first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!("backward from non-scalar {:?}", self.value(loss).shape()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    /// Mutable gradient buffer of `v`, allocated on first use; `None` when untracked.
    fn grad_buf(&mut self, v: Var) -> Option<&mut [T]> {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(node.grad.get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn accumulate(&mut self, v: Var, contrib: impl Fn(usize) -> T) {
        if let Some(buf) = self.grad_buf(v) {
            buf.iter_mut().enumerate().for_each(|(i, b)| *b = *b + contrib(i));
        }
    }

    fn backprop(&mut self, node: usize, op: &Op<T>, g: &[T]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, |i| g[i]);
                self.accumulate(*b, |i| g[i]);
            }
            Op::AddBias { x, bias } => {
                self.accumulate(*x, |i| g[i]);
                let d = self.value(*bias).len();
                let mut acc = vec![0.0f64; d];
                for (i, gi) in g.iter().enumerate() {
                    acc[i % d] += gi.as_f64();
                }
                self.accumulate(*bias, |j| T::of(acc[j]));
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.arc(*a), self.arc(*b));
                let (m, k) = av.dims2().expect("matmul lhs");
                let n = bv.shape()[1];
                if let Some(ga) = self.grad_buf(*a) {
                    // dA = G·Bᵀ
                    T::gemm(m, n, k, g, (n, 1), bv.data(), (1, n), ga, (k, 1), true);
                }
                if let Some(gb) = self.grad_buf(*b) {
                    // dB = Aᵀ·G
                    T::gemm(k, m, n, av.data(), (1, k), g, (n, 1), gb, (n, 1), true);
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(*x, |i| T::of(g[i].as_f64() * s));
            }
            Op::Gelu(x) => {
                let xv = self.arc(*x);
                self.accumulate(*x, |i| {
                    T::of(g[i].as_f64() * kernels::gelu_grad_scalar(xv.data()[i].as_f64()))
                });
            }
            Op::LayerNorm { x, gamma, beta, means, rstds } => {
                self.layer_norm_backward(*x, *gamma, *beta, means, rstds, g);
            }
            Op::Dropout { x, mask } => {
                self.accumulate(*x, |i| g[i] * mask[i]);
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, g);
            }
            Op::MeanPool { x, factor } => {
                let d = *self.value(*x).shape().last().expect("pool rank");
                let inv = 1.0 / *factor as f64;
                let f = *factor;
                self.accumulate(*x, |i| {
                    let (r, c) = (i / d, i % d);
                    T::of(g[(r / f) * d + c].as_f64() * inv)
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).shape()[1];
                if let Some(gt) = self.grad_buf(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[id * d + c] = gt[id * d + c] + g[r * d + c];
                        }
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).len();
                self.accumulate(*a, |i| g[i]);
                self.accumulate(*b, |i| g[split + i]);
            }
            Op::Im2Col { x, kernel, stride, pad } => {
                let (t, c) = self.value(*x).dims2().expect("im2col rank");
                let t_out = g.len() / (kernel * c);
                if let Some(gx) = self.grad_buf(*x) {
                    for o in 0..t_out {
                        for j in 0..*kernel {
                            let src = (o * stride + j) as isize - *pad as isize;
                            if src < 0 || src as usize >= t {
                                continue;
                            }
                            let base = o * kernel * c + j * c;
                            for ch in 0..c {
                                let dst = src as usize * c + ch;
                                gx[dst] = gx[dst] + g[base + ch];
                            }
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = Arc::clone(&self.nodes[node].value);
                let n = *y.shape().last().unwrap_or(&1);
                let mut contrib = vec![T::zero(); y.len()];
                for ((yr, gr), cr) in y.data().chunks(n).zip(g.chunks(n)).zip(contrib.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                    for j in 0..n {
                        cr[j] = T::of(yr[j].as_f64() * (gr[j].as_f64() - dot));
                    }
                }
                self.accumulate(*x, |i| contrib[i]);
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.accumulate(*x, |_| g0);
            }
            Op::Custom { inputs, partials } => {
                let g0 = g[0].as_f64();
                for (v, p) in inputs.iter().zip(partials) {
                    self.accumulate(*v, |i| T::of(p[i].as_f64() * g0));
                }
            }
        }
    }

    fn layer_norm_backward(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        means: &[f64],
        rstds: &[f64],
        g: &[T],
    ) {
        let xv = self.arc(x);
        let gv = self.arc(gamma);
        let d = gv.len();
        let mut dgamma = vec![0.0f64; d];
        let mut dbeta = vec![0.0f64; d];
        let mut dx = vec![T::zero(); xv.len()];
        let mut xhat = vec![0.0f64; d];
        let mut gxhat = vec![0.0f64; d];
        for (r, (xr, gr)) in xv.data().chunks(d).zip(g.chunks(d)).enumerate() {
            let (mean, rstd) = (means[r], rstds[r]);
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for j in 0..d {
                xhat[j] = (xr[j].as_f64() - mean) * rstd;
                let gj = gr[j].as_f64();
                gxhat[j] = gj * gv.data()[j].as_f64();
                dgamma[j] += gj * xhat[j];
                dbeta[j] += gj;
                m1 += gxhat[j];
                m2 += gxhat[j] * xhat[j];
            }
            m1 /= d as f64;
            m2 /= d as f64;
            for j in 0..d {
                dx[r * d + j] = T::of(rstd * (gxhat[j] - m1 - xhat[j] * m2));
            }
        }
        self.accumulate(x, |i| dx[i]);
        self.accumulate(gamma, |j| T::of(dgamma[j]));
        self.accumulate(beta, |j| T::of(dbeta[j]));
    }

    fn attention_backward(&mut self, q: Var, k: Var, v: Var, heads: usize, probs: &[T], g: &[T]) {
        let (qv, kv, vv) = (self.arc(q), self.arc(k), self.arc(v));
        let (tq, d) = qv.dims2().expect("attention q");
        let tk = kv.shape()[0];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![T::zero(); qv.len()];
        let mut dk = vec![T::zero(); kv.len()];
        let mut dv = vec![T::zero(); vv.len()];
        let mut dp = vec![T::zero(); tq * tk];
        for h in 0..heads {
            let off = h * dh;
            let p = &probs[h * tq * tk..(h + 1) * tq * tk];
            // dV_h = Pᵀ·dO_h
            T::gemm(tk, tq, dh, p, (1, tk), &g[off..], (d, 1), &mut dv[off..], (d, 1), true);
            // dP = dO_h·V_hᵀ
            T::gemm(tq, dh, tk, &g[off..], (d, 1), &vv.data()[off..], (1, d), &mut dp, (tk, 1), false);
            for (pr, dpr) in p.chunks(tk).zip(dp.chunks_mut(tk)) {
                let dot: f64 = pr.iter().zip(dpr.iter()).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                for j in 0..tk {
                    dpr[j] = T::of(pr[j].as_f64() * (dpr[j].as_f64() - dot) * scale);
                }
            }
            // dQ_h = dS·K_h, dK_h = dSᵀ·Q_h
            T::gemm(tq, tk, dh, &dp, (tk, 1), &kv.data()[off..], (d, 1), &mut dq[off..], (d, 1), true);
            T::gemm(tk, tq, dh, &dp, (1, tk), &qv.data()[off..], (d, 1), &mut dk[off..], (d, 1), true);
        }
        self.accumulate(q, |i| dq[i]);
        self.accumulate(k, |i| dk[i]);
        self.accumulate(v, |i| dv[i]);
    }
}
