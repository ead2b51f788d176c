use alloc::format;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize, gain: f64, rng: &mut Rng) -> Self {
        let w = store.add_uniform(format!("{name}.w"), &[cout, cin, k, k], cin * k * k, gain, rng);
        let b = store.add_const(format!("{name}.b"), &[cout], 0.0);
        Self { w, b, stride, pad: k / 2 }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, gain: f64, rng: &mut Rng) -> Self {
        let w = store.add_uniform(format!("{name}.w"), &[dout, din], din, gain, rng);
        let b = store.add_const(format!("{name}.b"), &[dout], 0.0);
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        let groups = groups.min(channels).max(1);
        let groups = (1..=groups).rev().find(|g| channels % g == 0).unwrap_or(1);
        Self {
            gamma: store.add_const(format!("{name}.gamma"), &[channels], 1.0),
            beta: store.add_const(format!("{name}.beta"), &[channels], 0.0),
            groups,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.group_norm(x, gamma, beta, self.groups)
    }
}

/// Pre-activation residual block with an optional per-channel embedding
/// injected between the two convolutions.
#[derive(Debug, Clone, Copy)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, emb_dim: Option<usize>, groups: usize, rng: &mut Rng) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin, groups),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, 1.0, rng),
            emb: emb_dim.map(|d| Linear::new(store, &format!("{name}.emb"), d, cout, 1.0, rng)),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout, groups),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 0.5, rng),
            skip: (cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, 1.0, rng)),
        }
    }

    /// `emb` is the already-activated embedding `[n, emb_dim]`.
    pub fn forward(&self, g: &mut Graph, x: Var, emb: Option<Var>) -> Var {
        let h = self.norm1.forward(g, x);
        let h = g.silu(h);
        let mut h = self.conv1.forward(g, h);
        if let (Some(proj), Some(e)) = (&self.emb, emb) {
            let e = proj.forward(g, e);
            h = g.add_channel(h, e);
        }
        let h = self.norm2.forward(g, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, h);
        let skip = match &self.skip {
            Some(s) => s.forward(g, x),
            None => x,
        };
        g.add(skip, h)
    }
}

/// Single-head cross attention from spatial features to a set of context
/// tokens, added residually.
#[derive(Debug, Clone, Copy)]
pub struct CrossAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    dim: usize,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, ctx_dim: usize, dim: usize, groups: usize, rng: &mut Rng) -> Self {
        Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), channels, groups),
            q: Linear::new(store, &format!("{name}.q"), channels, dim, 1.0, rng),
            k: Linear::new(store, &format!("{name}.k"), ctx_dim, dim, 1.0, rng),
            v: Linear::new(store, &format!("{name}.v"), ctx_dim, dim, 1.0, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, channels, 0.5, rng),
            dim,
        }
    }

    /// `x: [n, c, h, w]`, `ctx: [n, m, ctx_dim]`.
    pub fn forward(&self, g: &mut Graph, x: Var, ctx: Var) -> Var {
        let [n, c, h, w] = g.value(x).dims4();
        let hn = self.norm.forward(g, x);
        let t = g.reshape(hn, &[n, c, h * w]);
        let t = g.swap_last2(t);
        let q = self.q.forward(g, t);
        let k = self.k.forward(g, ctx);
        let v = self.v.forward(g, ctx);
        let scores = g.bmm(q, k, true);
        let scores = g.scale(scores, 1.0 / libm::sqrt(self.dim as f64));
        let attn = g.softmax_last(scores);
        let out = g.bmm(attn, v, false);
        let out = self.o.forward(g, out);
        let out = g.swap_last2(out);
        let out = g.reshape(out, &[n, c, h, w]);
        g.add(x, out)
    }
}
