use alloc::vec::Vec;

use super::params::ParamStore;
use super::tensor::Tensor;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|t| Tensor::zeros(&t.shape)).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        self.step += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        for (((p, g), m), v) in store.iter_mut().zip(grads).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= self.lr * mh / (libm::sqrt(vh) + self.eps);
            }
        }
    }
}

/// Global L2 norm of a gradient set.
pub fn grad_norm(grads: &[Tensor]) -> f64 {
    libm::sqrt(grads.iter().flat_map(|g| g.data.iter()).map(|v| v * v).sum())
}

/// Rescale gradients so their global norm does not exceed `max_norm`.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let n = grad_norm(grads);
    if n > max_norm && n.is_finite() {
        let s = max_norm / n;
        grads.iter_mut().flat_map(|g| g.data.iter_mut()).for_each(|v| *v *= s);
    }
    n
}
