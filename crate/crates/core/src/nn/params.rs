use alloc::string::String;
use alloc::vec::Vec;

use super::tensor::Tensor;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// He-style uniform init scaled by `gain / sqrt(fan_in)`.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, gain: f64, rng: &mut Rng) -> ParamId {
        let bound = gain * libm::sqrt(3.0 / fan_in.max(1) as f64);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng::uniform_range(rng, -bound, bound)).collect();
        self.add(name, Tensor::new(shape, data))
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        let mut t = Tensor::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        self.add(name, t)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Replace all tensors, checking names and shapes against the current layout.
    pub fn load(&mut self, named: Vec<(String, Tensor)>) -> crate::Result<()> {
        if named.len() != self.tensors.len() {
            crate::error::bail!(Compatibility, "expected {} tensors, got {}", self.tensors.len(), named.len());
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != self.names[i] || t.shape != self.tensors[i].shape {
                crate::error::bail!(
                    Compatibility,
                    "parameter {} ({:?}) does not match {} ({:?})",
                    i,
                    t.shape,
                    self.names[i],
                    self.tensors[i].shape
                );
            }
            self.tensors[i] = t;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}
