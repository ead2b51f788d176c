//! Minimal CPU neural-network toolkit: tensors, a reverse-mode tape,
//! a handful of layers and Adam.

mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{Graph, Var};
pub use layers::{Conv2d, CrossAttention, GroupNorm, Linear, ResBlock};
pub use optim::{clip_grad_norm, grad_norm, Adam};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

use alloc::vec::Vec;

use crate::rng::{self, Rng};

/// Result of comparing tape gradients against central finite differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Compare analytic gradients with central differences on `samples`
/// randomly chosen scalar parameters. `build` must record a scalar loss.
pub fn check_gradients(store: &ParamStore, build: &dyn Fn(&mut Graph) -> Var, samples: usize, rng: &mut Rng) -> GradCheck {
    let analytic = {
        let mut g = Graph::new(store);
        let loss = build(&mut g);
        g.backward(loss)
    };
    let sizes: Vec<usize> = store.iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let h = 1e-5;
    let mut max_rel = 0.0f64;
    for _ in 0..samples {
        let mut flat = rng::below(rng, total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let id = ParamId(which);
        let eval = |delta: f64| {
            let mut s = store.clone();
            s.get_mut(id).data[flat] += delta;
            let mut g = Graph::new(&s);
            let l = build(&mut g);
            g.value(l).data[0]
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let a = analytic[which].data[flat];
        let denom = libm::fabs(a).max(libm::fabs(numeric)).max(1e-6);
        max_rel = max_rel.max(libm::fabs(a - numeric) / denom);
    }
    GradCheck { checked: samples, max_rel_err: max_rel }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn input(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, rng::normal_vec(rng, n))
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut r = rng::seeded(7);
        let mut store = ParamStore::new();
        let conv_a = Conv2d::new(&mut store, "a", 2, 4, 3, 1, 1.0, &mut r);
        let conv_b = Conv2d::new(&mut store, "b", 4, 4, 3, 2, 1.0, &mut r);
        let res = ResBlock::new(&mut store, "res", 4, 6, Some(5), 2, &mut r);
        let attn = CrossAttention::new(&mut store, "attn", 6, 3, 4, 2, &mut r);
        let emb = Linear::new(&mut store, "emb", 3, 5, 1.0, &mut r);
        let head = Linear::new(&mut store, "head", 6, 3, 1.0, &mut r);
        let x = input(&mut r, &[2, 2, 6, 6]);
        let ctx = input(&mut r, &[2, 2, 3]);
        let e_in = input(&mut r, &[2, 3]);
        let target = rng::normal_vec(&mut r, 2 * 6 * 6 * 6);
        let mask: Vec<f64> = (0..target.len()).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();

        let build = |g: &mut Graph| {
            let xv = g.input(x.clone());
            let c = g.input(ctx.clone());
            let e = g.input(e_in.clone());
            let h = conv_a.forward(g, xv);
            let h = g.silu(h);
            let h = conv_b.forward(g, h);
            let h = g.upsample2x(h);
            let e = emb.forward(g, e);
            let e = g.silu(e);
            let h = res.forward(g, h, Some(e));
            let h = attn.forward(g, h, c);
            let skip = g.concat(h, h);
            let pooled = g.global_avg_pool(skip);
            let l0 = g.mse(pooled, vec![0.1; 24]);
            let l1 = g.masked_mse(h, target.clone(), mask.clone());
            let p = g.global_avg_pool(h);
            let logits = head.forward(g, p);
            let l2 = g.softmax_cross_entropy(logits, vec![0, 2]);
            let l = g.add(l1, l2);
            g.add(l, l0)
        };
        let res = check_gradients(&store, &build, 150, &mut r);
        assert!(res.max_rel_err < 1e-4, "max relative error {}", res.max_rel_err);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut r = rng::seeded(3);
        let mut store = ParamStore::new();
        for (k, stride, h, w) in [(3, 1, 5, 7), (3, 2, 7, 6), (1, 1, 4, 4), (3, 2, 8, 8)] {
            let conv = Conv2d::new(&mut store, "c", 2, 3, k, stride, 1.0, &mut r);
            let x = input(&mut r, &[1, 2, h, w]);
            let mut g = Graph::new(&store);
            let xv = g.input(x.clone());
            let y = conv.forward(&mut g, xv);
            let y = g.value(y).clone();
            let wt = store.tensors()[store.len() - 2].clone();
            let pad = k / 2;
            let [_, co, ho, wo] = y.dims4();
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..2 {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        s += wt.data[((o * 2 + ci) * k + ky) * k + kx] * x.data[(ci * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                        }
                        assert!((s - y.data[(o * ho + oy) * wo + ox]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn adam_decreases_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::new(&[2], vec![3.0, -2.0]));
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..300 {
            let g = Tensor::new(&[2], store.get(id).data.iter().map(|v| 2.0 * v).collect());
            opt.step(&mut store, &[g]);
        }
        assert!(store.get(id).data.iter().all(|v| v.abs() < 0.05));
    }
}
