//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! gradients for every parameter of the bound [`ParamStore`].

use alloc::vec;
use alloc::vec::Vec;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const GN_EPS: f64 = 1e-5;

enum Op {
    Input,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    AddChannel { x: Var, e: Var },
    Silu(Var),
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Upsample2x(Var),
    Concat(Var, Var),
    Reshape(Var),
    SwapLast2(Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    SoftmaxLast(Var),
    Scale(Var, f64),
    GlobalAvgPool(Var),
    MaskedMse { pred: Var, target: Vec<f64>, mask: Vec<f64>, count: f64 },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    needs_grad: Vec<bool>,
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 3] {
        match self {
            Op::Input | Op::Param(_) => [None, None, None],
            Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => [Some(*x), Some(*w), Some(*b)],
            Op::GroupNorm { x, gamma, beta, .. } => [Some(*x), Some(*gamma), Some(*beta)],
            Op::Add(a, b) | Op::Concat(a, b) | Op::Bmm { a, b, .. } => [Some(*a), Some(*b), None],
            Op::AddChannel { x, e } => [Some(*x), Some(*e), None],
            Op::Silu(x)
            | Op::Upsample2x(x)
            | Op::Reshape(x)
            | Op::SwapLast2(x)
            | Op::SoftmaxLast(x)
            | Op::Scale(x, _)
            | Op::GlobalAvgPool(x) => [Some(*x), None, None],
            Op::MaskedMse { pred, .. } => [Some(*pred), None, None],
            Op::SoftmaxCrossEntropy { logits, .. } => [Some(*logits), None, None],
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kx - pad`
/// falls inside `0..w`.
fn valid_span(w: usize, wo: usize, kx: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    // Largest ox with ox * stride + kx - pad <= w - 1.
    let hi = if w + pad > kx { ((w - 1 + pad - kx) / stride + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, cols: &mut [f64]) {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let hw = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let (lo, hi) = valid_span(w, wo, kx, stride, pad);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    let start = lo * stride + kx - pad;
                    if stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (j, d) in dst[lo..hi].iter_mut().enumerate() {
                            *d = src[start + j * stride];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, dx: &mut [f64]) {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let hw = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let (lo, hi) = valid_span(w, wo, kx, stride, pad);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * wo..(oy + 1) * wo];
                    let start = lo * stride + kx - pad;
                    for (j, s) in src[lo..hi].iter().enumerate() {
                        dst[start + j * stride] += s;
                    }
                }
            }
        }
    }
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { store, nodes: Vec::new(), needs_grad: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs = matches!(op, Op::Param(_)) || op.inputs().iter().flatten().any(|v| self.needs_grad[v.0]);
        self.needs_grad.push(needs);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn into_value(mut self, v: Var) -> Tensor {
        core::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let t = self.store.get(id).clone();
        self.push(t, Op::Param(id))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let [n, c, h, wd] = self.value(x).dims4();
        let ws = &self.value(w).shape;
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], c, "conv input channels");
        let ho = conv_out(h, k, stride, pad);
        let wo = conv_out(wd, k, stride, pad);
        let kk = c * k * k;
        let mut cols = vec![0.0; kk * ho * wo];
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        {
            let xv = &self.nodes[x.0].value.data;
            let wv = &self.nodes[w.0].value.data;
            let bv = &self.nodes[b.0].value.data;
            for i in 0..n {
                im2col(&xv[i * c * h * wd..(i + 1) * c * h * wd], c, h, wd, k, stride, pad, &mut cols);
                let o = &mut out.data[i * cout * ho * wo..(i + 1) * cout * ho * wo];
                for (co, chunk) in o.chunks_mut(ho * wo).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = bv[co]);
                }
                gemm(cout, kk, ho * wo, wv, false, &cols, false, 1.0, o);
            }
        }
        self.push(out, Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.value(x);
        let din = xs.last_dim();
        let rows = xs.len() / din;
        let (dout, win) = (self.value(w).shape[0], self.value(w).shape[1]);
        assert_eq!(din, win, "linear input features");
        let mut shape = xs.shape.clone();
        *shape.last_mut().unwrap() = dout;
        let mut out = Tensor::zeros(&shape);
        let bv = &self.value(b).data;
        for r in 0..rows {
            out.data[r * dout..(r + 1) * dout].copy_from_slice(bv);
        }
        gemm(rows, din, dout, &self.value(x).data, false, &self.value(w).data, true, 1.0, &mut out.data);
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape, self.value(b).shape, "add shapes");
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// `x[n, c, ..] + e[n, c]` broadcast over spatial positions.
    pub fn add_channel(&mut self, x: Var, e: Var) -> Var {
        let [n, c, h, w] = self.value(x).dims4();
        assert_eq!(self.value(e).shape, [n, c], "channel embedding shape");
        let mut out = self.value(x).clone();
        let ev = &self.value(e).data;
        for (j, chunk) in out.data.chunks_mut(h * w).enumerate() {
            let add = ev[j];
            chunk.iter_mut().for_each(|v| *v += add);
        }
        let _ = (n, c);
        self.push(out, Op::AddChannel { x, e })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let out = Tensor { shape: xs.shape.clone(), data: xs.data.iter().map(|&v| v * sigmoid(v)).collect() };
        self.push(out, Op::Silu(x))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let [n, c, h, w] = self.value(x).dims4();
        assert_eq!(c % groups, 0, "channels divisible by groups");
        let cg = c / groups;
        let m = cg * h * w;
        let xv = &self.value(x).data;
        let gv = &self.value(gamma).data;
        let bv = &self.value(beta).data;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; n * groups];
        let mut out = Tensor::zeros(&[n, c, h, w]);
        for i in 0..n {
            for g in 0..groups {
                let off = (i * c + g * cg) * h * w;
                let seg = &xv[off..off + m];
                let mean = seg.iter().sum::<f64>() / m as f64;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                let r = 1.0 / libm::sqrt(var + GN_EPS);
                rstd[i * groups + g] = r;
                for (j, &v) in seg.iter().enumerate() {
                    let xh = (v - mean) * r;
                    let ch = g * cg + j / (h * w);
                    xhat[off + j] = xh;
                    out.data[off + j] = xh * gv[ch] + bv[ch];
                }
            }
        }
        self.push(out, Op::GroupNorm { x, gamma, beta, groups, xhat, rstd })
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.value(x).dims4();
        let xv = &self.value(x).data;
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out.data[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        self.push(out, Op::Upsample2x(x))
    }

    /// Concatenate along the channel axis of two `[n, c, h, w]` tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let [n, ca, h, w] = self.value(a).dims4();
        let [nb, cb, hb, wb] = self.value(b).dims4();
        assert!(n == nb && h == hb && w == wb, "concat shapes");
        let mut out = Tensor::zeros(&[n, ca + cb, h, w]);
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        let (sa, sb) = (ca * h * w, cb * h * w);
        for i in 0..n {
            out.data[i * (sa + sb)..i * (sa + sb) + sa].copy_from_slice(&av[i * sa..(i + 1) * sa]);
            out.data[i * (sa + sb) + sa..(i + 1) * (sa + sb)].copy_from_slice(&bv[i * sb..(i + 1) * sb]);
        }
        self.push(out, Op::Concat(a, b))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let mut out = self.value(x).clone();
        assert_eq!(shape.iter().product::<usize>(), out.len(), "reshape size");
        out.shape = shape.to_vec();
        self.push(out, Op::Reshape(x))
    }

    /// `[b, p, q] -> [b, q, p]`.
    pub fn swap_last2(&mut self, x: Var) -> Var {
        let s = &self.value(x).shape;
        assert_eq!(s.len(), 3);
        let (b, p, q) = (s[0], s[1], s[2]);
        let xv = &self.value(x).data;
        let mut out = Tensor::zeros(&[b, q, p]);
        for i in 0..b {
            for r in 0..p {
                for c in 0..q {
                    out.data[i * p * q + c * p + r] = xv[i * p * q + r * q + c];
                }
            }
        }
        self.push(out, Op::SwapLast2(x))
    }

    /// Batched matmul: `a[B, m, k] x b[B, k, n]`, or `b[B, n, k]` transposed.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (sa, sb) = (&self.value(a).shape, &self.value(b).shape);
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0]);
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        assert_eq!(if trans_b { sb[2] } else { sb[1] }, k, "bmm inner dims");
        let mut out = Tensor::zeros(&[bs, m, n]);
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        for i in 0..bs {
            gemm(m, k, n, &av[i * m * k..], false, &bv[i * k * n..], trans_b, 0.0, &mut out.data[i * m * n..]);
        }
        self.push(out, Op::Bmm { a, b, trans_b })
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let d = xs.last_dim();
        let mut out = xs.clone();
        for row in out.data.chunks_mut(d) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - mx);
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push(out, Op::SoftmaxLast(x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let xs = self.value(x);
        let out = Tensor { shape: xs.shape.clone(), data: xs.data.iter().map(|v| v * s).collect() };
        self.push(out, Op::Scale(x, s))
    }

    /// `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.value(x).dims4();
        let xv = &self.value(x).data;
        let hw = (h * w) as f64;
        let data = xv.chunks(h * w).map(|p| p.iter().sum::<f64>() / hw).collect();
        self.push(Tensor::new(&[n, c], data), Op::GlobalAvgPool(x))
    }

    /// Mean of `mask * (pred - target)^2` over voxels where `mask > 0`.
    pub fn masked_mse(&mut self, pred: Var, target: Vec<f64>, mask: Vec<f64>) -> Var {
        let pv = &self.value(pred).data;
        assert!(pv.len() == target.len() && pv.len() == mask.len(), "masked mse lengths");
        let count: f64 = mask.iter().sum();
        let mut s = 0.0;
        for i in 0..pv.len() {
            if mask[i] != 0.0 {
                let d = pv[i] - target[i];
                s += mask[i] * d * d;
            }
        }
        let loss = if count > 0.0 { s / count } else { 0.0 };
        self.push(Tensor::new(&[1], vec![loss]), Op::MaskedMse { pred, target, mask, count })
    }

    pub fn mse(&mut self, pred: Var, target: Vec<f64>) -> Var {
        let n = target.len();
        self.masked_mse(pred, target, vec![1.0; n])
    }

    /// Mean softmax cross-entropy of `logits[n, k]` against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let lv = self.value(logits);
        let k = lv.last_dim();
        let n = lv.len() / k;
        assert_eq!(labels.len(), n);
        let mut probs = lv.data.clone();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(k).zip(labels.iter()) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - mx);
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
            loss -= libm::log(row[y].max(1e-300));
        }
        loss /= n as f64;
        self.push(Tensor::new(&[1], vec![loss]), Op::SoftmaxCrossEntropy { logits, labels, probs })
    }

    /// Gradients of a scalar node w.r.t. every parameter in the store.
    pub fn backward(&self, loss: Var) -> Vec<Tensor> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor { shape: self.nodes[loss.0].value.shape.clone(), data: vec![1.0; self.nodes[loss.0].value.len()] });
        let mut out: Vec<Tensor> = self.store.iter().map(|t| Tensor::zeros(&t.shape)).collect();

        for idx in (0..=loss.0).rev() {
            if !self.needs_grad[idx] {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out[id.0].add_assign(&gy),
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (stride, pad) = (*stride, *pad);
                    let [n, c, h, wd] = self.value(*x).dims4();
                    let ws = &self.value(*w).shape;
                    let (cout, k) = (ws[0], ws[2]);
                    let [_, _, ho, wo] = node.value.dims4();
                    let kk = c * k * k;
                    let xv = &self.value(*x).data;
                    let wv = &self.value(*w).data;
                    let mut dw = Tensor::zeros(ws);
                    let mut db = Tensor::zeros(&[cout]);
                    let mut dx = Tensor::zeros(&[n, c, h, wd]);
                    let mut cols = vec![0.0; kk * ho * wo];
                    let mut dcols = vec![0.0; kk * ho * wo];
                    for i in 0..n {
                        let dyi = &gy.data[i * cout * ho * wo..(i + 1) * cout * ho * wo];
                        for (co, chunk) in dyi.chunks(ho * wo).enumerate() {
                            db.data[co] += chunk.iter().sum::<f64>();
                        }
                        im2col(&xv[i * c * h * wd..(i + 1) * c * h * wd], c, h, wd, k, stride, pad, &mut cols);
                        gemm(cout, ho * wo, kk, dyi, false, &cols, true, 1.0, &mut dw.data);
                        if self.needs_grad[x.0] {
                            gemm(kk, cout, ho * wo, wv, true, dyi, false, 0.0, &mut dcols);
                            col2im(&dcols, c, h, wd, k, stride, pad, &mut dx.data[i * c * h * wd..(i + 1) * c * h * wd]);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::Linear { x, w, b } => {
                    let xt = self.value(*x);
                    let wt = self.value(*w);
                    let (dout, din) = (wt.shape[0], wt.shape[1]);
                    let rows = xt.len() / din;
                    let mut dx = Tensor::zeros(&xt.shape);
                    gemm(rows, dout, din, &gy.data, false, &wt.data, false, 0.0, &mut dx.data);
                    let mut dw = Tensor::zeros(&wt.shape);
                    gemm(dout, rows, din, &gy.data, true, &xt.data, false, 0.0, &mut dw.data);
                    let mut db = Tensor::zeros(&[dout]);
                    for r in gy.data.chunks(dout) {
                        for (d, v) in db.data.iter_mut().zip(r) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, gy.clone());
                    accumulate(&mut grads, *a, gy);
                }
                Op::AddChannel { x, e } => {
                    let [n, c, h, w] = node.value.dims4();
                    let data = gy.data.chunks(h * w).map(|p| p.iter().sum::<f64>()).collect();
                    accumulate(&mut grads, *e, Tensor::new(&[n, c], data));
                    accumulate(&mut grads, *x, gy);
                }
                Op::Silu(x) => {
                    let xv = &self.value(*x).data;
                    let mut dx = gy;
                    for (d, &v) in dx.data.iter_mut().zip(xv.iter()) {
                        let s = sigmoid(v);
                        *d *= s * (1.0 + v * (1.0 - s));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
                    let [n, c, h, w] = node.value.dims4();
                    let groups = *groups;
                    let cg = c / groups;
                    let m = cg * h * w;
                    let gv = &self.value(*gamma).data;
                    let mut dgamma = Tensor::zeros(&[c]);
                    let mut dbeta = Tensor::zeros(&[c]);
                    let mut dx = Tensor::zeros(&[n, c, h, w]);
                    let mut dxh = vec![0.0; m];
                    for i in 0..n {
                        for g in 0..groups {
                            let off = (i * c + g * cg) * h * w;
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..m {
                                let ch = g * cg + j / (h * w);
                                let dy = gy.data[off + j];
                                dgamma.data[ch] += dy * xhat[off + j];
                                dbeta.data[ch] += dy;
                                dxh[j] = dy * gv[ch];
                                s1 += dxh[j];
                                s2 += dxh[j] * xhat[off + j];
                            }
                            let r = rstd[i * groups + g];
                            let (mean1, mean2) = (s1 / m as f64, s2 / m as f64);
                            for j in 0..m {
                                dx.data[off + j] = r * (dxh[j] - mean1 - xhat[off + j] * mean2);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::Upsample2x(x) => {
                    let [n, c, h, w] = self.value(*x).dims4();
                    let mut dx = Tensor::zeros(&[n, c, h, w]);
                    for p in 0..n * c {
                        let src = &gy.data[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let dst = &mut dx.data[p * h * w..(p + 1) * h * w];
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat(a, b) => {
                    let [n, ca, h, w] = self.value(*a).dims4();
                    let cb = self.value(*b).shape[1];
                    let (sa, sb) = (ca * h * w, cb * h * w);
                    let mut da = Tensor::zeros(&[n, ca, h, w]);
                    let mut db = Tensor::zeros(&[n, cb, h, w]);
                    for i in 0..n {
                        da.data[i * sa..(i + 1) * sa].copy_from_slice(&gy.data[i * (sa + sb)..i * (sa + sb) + sa]);
                        db.data[i * sb..(i + 1) * sb].copy_from_slice(&gy.data[i * (sa + sb) + sa..(i + 1) * (sa + sb)]);
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Reshape(x) => {
                    let mut dx = gy;
                    dx.shape = self.value(*x).shape.clone();
                    accumulate(&mut grads, *x, dx);
                }
                Op::SwapLast2(x) => {
                    let s = &self.value(*x).shape;
                    let (b, p, q) = (s[0], s[1], s[2]);
                    let mut dx = Tensor::zeros(s);
                    for i in 0..b {
                        for r in 0..p {
                            for c in 0..q {
                                dx.data[i * p * q + r * q + c] = gy.data[i * p * q + c * p + r];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Bmm { a, b, trans_b } => {
                    let at = self.value(*a);
                    let bt = self.value(*b);
                    let (bs, m, k) = (at.shape[0], at.shape[1], at.shape[2]);
                    let n = if *trans_b { bt.shape[1] } else { bt.shape[2] };
                    let mut da = Tensor::zeros(&at.shape);
                    let mut db = Tensor::zeros(&bt.shape);
                    for i in 0..bs {
                        let dy = &gy.data[i * m * n..(i + 1) * m * n];
                        let ai = &at.data[i * m * k..(i + 1) * m * k];
                        let bi = &bt.data[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(m, n, k, dy, false, bi, false, 0.0, &mut da.data[i * m * k..]);
                            gemm(n, m, k, dy, true, ai, false, 0.0, &mut db.data[i * k * n..]);
                        } else {
                            gemm(m, n, k, dy, false, bi, true, 0.0, &mut da.data[i * m * k..]);
                            gemm(k, m, n, ai, true, dy, false, 0.0, &mut db.data[i * k * n..]);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::SoftmaxLast(x) => {
                    let d = node.value.last_dim();
                    let mut dx = gy;
                    for (g, y) in dx.data.chunks_mut(d).zip(node.value.data.chunks(d)) {
                        let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                        for (gi, yi) in g.iter_mut().zip(y) {
                            *gi = yi * (*gi - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Scale(x, s) => {
                    let mut dx = gy;
                    dx.data.iter_mut().for_each(|v| *v *= *s);
                    accumulate(&mut grads, *x, dx);
                }
                Op::GlobalAvgPool(x) => {
                    let [n, c, h, w] = self.value(*x).dims4();
                    let hw = (h * w) as f64;
                    let mut dx = Tensor::zeros(&[n, c, h, w]);
                    for (p, chunk) in dx.data.chunks_mut(h * w).enumerate() {
                        let v = gy.data[p] / hw;
                        chunk.iter_mut().for_each(|d| *d = v);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaskedMse { pred, target, mask, count } => {
                    let pv = self.value(*pred);
                    let mut dx = Tensor::zeros(&pv.shape);
                    if *count > 0.0 {
                        let s = 2.0 * gy.data[0] / count;
                        for i in 0..pv.len() {
                            if mask[i] != 0.0 {
                                dx.data[i] = s * mask[i] * (pv.data[i] - target[i]);
                            }
                        }
                    }
                    accumulate(&mut grads, *pred, dx);
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let lv = self.value(*logits);
                    let k = lv.last_dim();
                    let n = labels.len();
                    let s = gy.data[0] / n as f64;
                    let mut dx = Tensor { shape: lv.shape.clone(), data: probs.clone() };
                    for (row, &y) in dx.data.chunks_mut(k).zip(labels.iter()) {
                        row[y] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= s);
                    }
                    accumulate(&mut grads, *logits, dx);
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
