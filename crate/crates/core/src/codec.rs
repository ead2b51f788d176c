//! Latent codecs mapping images to a reduced-resolution latent space.
//!
//! `identity` runs diffusion directly in pixel space. `conv_ae` is a small
//! strided convolutional autoencoder (in-plane factor 4, three latent
//! channels) trained with a plain reconstruction loss. 3-D volumes are coded
//! slice by slice, so the through-plane factor is always 1.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::geometry::VolumeGrid;
use crate::nn::{clip_grad_norm, Adam, Conv2d, Graph, ParamStore, Tensor, Var};
use crate::rng;
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    Identity,
    ConvAe,
}

impl CodecKind {
    pub fn name(self) -> &'static str {
        match self {
            CodecKind::Identity => "identity",
            CodecKind::ConvAe => "conv_ae",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(CodecKind::Identity),
            "conv_ae" => Some(CodecKind::ConvAe),
            _ => None,
        }
    }
}

pub trait LatentCodec {
    fn kind(&self) -> CodecKind;
    fn image_grid(&self) -> VolumeGrid;
    fn latent_grid(&self) -> VolumeGrid;
    fn channels(&self) -> usize;
    fn encode(&self, x: &Volume) -> Result<Volume>;
    fn decode(&self, z: &Volume) -> Result<Volume>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityCodec {
    grid: VolumeGrid,
}

impl IdentityCodec {
    pub fn new(grid: VolumeGrid) -> Self {
        Self { grid }
    }
}

impl LatentCodec for IdentityCodec {
    fn kind(&self) -> CodecKind {
        CodecKind::Identity
    }
    fn image_grid(&self) -> VolumeGrid {
        self.grid
    }
    fn latent_grid(&self) -> VolumeGrid {
        self.grid
    }
    fn channels(&self) -> usize {
        1
    }
    fn encode(&self, x: &Volume) -> Result<Volume> {
        x.expect_layout(&self.grid, 1, "encode input")?;
        Ok(x.clone())
    }
    fn decode(&self, z: &Volume) -> Result<Volume> {
        z.expect_layout(&self.grid, 1, "decode input")?;
        Ok(z.clone())
    }
}

pub const CONV_AE_FACTOR: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvAeConfig {
    pub latent_channels: usize,
    pub width: usize,
}

impl Default for ConvAeConfig {
    fn default() -> Self {
        Self { latent_channels: 3, width: 8 }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvAeLayers {
    enc: [Conv2d; 4],
    dec: [Conv2d; 5],
}

/// Strided convolutional autoencoder. Encoded latents are standardised per
/// channel with statistics measured on the training set.
#[derive(Debug, Clone)]
pub struct ConvAeCodec {
    config: ConvAeConfig,
    image_grid: VolumeGrid,
    latent_grid: VolumeGrid,
    layers: ConvAeLayers,
    params: ParamStore,
    shift: Vec<f64>,
    scale: Vec<f64>,
}

impl ConvAeCodec {
    pub fn new(image_grid: VolumeGrid, config: ConvAeConfig, seed: u64) -> Result<Self> {
        if config.latent_channels == 0 || config.width == 0 {
            bail!(Config, "conv_ae channels and width must be positive");
        }
        let latent_grid = image_grid.downsampled([CONV_AE_FACTOR, CONV_AE_FACTOR, 1])?;
        let mut r = rng::seeded(seed);
        let r = &mut r;
        let mut s = ParamStore::new();
        let (w, c) = (config.width, config.latent_channels);
        let enc = [
            Conv2d::new(&mut s, "enc.0", 1, w, 3, 1, 1.0, r),
            Conv2d::new(&mut s, "enc.1", w, 2 * w, 3, 2, 1.0, r),
            Conv2d::new(&mut s, "enc.2", 2 * w, 4 * w, 3, 2, 1.0, r),
            Conv2d::new(&mut s, "enc.3", 4 * w, c, 3, 1, 1.0, r),
        ];
        let dec = [
            Conv2d::new(&mut s, "dec.0", c, 4 * w, 3, 1, 1.0, r),
            Conv2d::new(&mut s, "dec.1", 4 * w, 4 * w, 3, 1, 1.0, r),
            Conv2d::new(&mut s, "dec.2", 4 * w, w, 3, 1, 1.0, r),
            Conv2d::new(&mut s, "dec.3", w, w, 3, 1, 1.0, r),
            Conv2d::new(&mut s, "dec.4", w, 1, 3, 1, 1.0, r),
        ];
        Ok(Self {
            config,
            image_grid,
            latent_grid,
            layers: ConvAeLayers { enc, dec },
            params: s,
            shift: vec![0.0; c],
            scale: vec![1.0; c],
        })
    }

    /// Rebuild a trained codec from stored weights and latent statistics.
    pub fn from_parts(
        image_grid: VolumeGrid,
        config: ConvAeConfig,
        named: Vec<(alloc::string::String, Tensor)>,
        shift: Vec<f64>,
        scale: Vec<f64>,
    ) -> Result<Self> {
        let mut c = Self::new(image_grid, config, 0)?;
        c.params.load(named)?;
        if shift.len() != config.latent_channels || scale.len() != config.latent_channels {
            bail!(Compatibility, "latent statistics do not match {} channels", config.latent_channels);
        }
        if scale.iter().any(|&s| !(s > 0.0) || !s.is_finite()) || shift.iter().any(|s| !s.is_finite()) {
            bail!(Compatibility, "invalid latent statistics");
        }
        c.shift = shift;
        c.scale = scale;
        Ok(c)
    }

    pub fn config(&self) -> &ConvAeConfig {
        &self.config
    }
    pub fn params(&self) -> &ParamStore {
        &self.params
    }
    pub fn latent_shift(&self) -> &[f64] {
        &self.shift
    }
    pub fn latent_scale(&self) -> &[f64] {
        &self.scale
    }

    fn enc_graph(&self, g: &mut Graph, x: Var) -> Var {
        let e = &self.layers.enc;
        let mut h = x;
        for (i, conv) in e.iter().enumerate() {
            h = conv.forward(g, h);
            if i + 1 < e.len() {
                h = g.silu(h);
            }
        }
        h
    }

    fn dec_graph(&self, g: &mut Graph, z: Var) -> Var {
        let d = &self.layers.dec;
        let mut h = d[0].forward(g, z);
        h = g.silu(h);
        h = d[1].forward(g, h);
        h = g.silu(h);
        h = g.upsample2x(h);
        h = d[2].forward(g, h);
        h = g.silu(h);
        h = g.upsample2x(h);
        h = d[3].forward(g, h);
        h = g.silu(h);
        d[4].forward(g, h)
    }

    /// Slices of `x` as a `[nz, 1, ny, nx]` batch.
    fn slices(v: &Volume, channels: usize) -> Tensor {
        let (nx, ny, nz) = (v.grid.nx(), v.grid.ny(), v.grid.nz());
        let plane = nx * ny;
        let mut data = Vec::with_capacity(v.len());
        for z in 0..nz {
            for c in 0..channels {
                data.extend_from_slice(&v.data[(c * nz + z) * plane..][..plane]);
            }
        }
        Tensor::new(&[nz, channels, ny, nx], data)
    }

    fn unslice(t: &Tensor, grid: VolumeGrid, channels: usize) -> Result<Volume> {
        let (nx, ny, nz) = (grid.nx(), grid.ny(), grid.nz());
        let plane = nx * ny;
        let mut out = Volume::zeros(grid, channels);
        for z in 0..nz {
            for c in 0..channels {
                out.data[(c * nz + z) * plane..][..plane].copy_from_slice(&t.data[(z * channels + c) * plane..][..plane]);
            }
        }
        if !out.is_finite() {
            bail!(Numerical, "codec produced non-finite values");
        }
        Ok(out)
    }

    fn check_batch(&self, xs: &[Volume]) -> Result<()> {
        if xs.is_empty() {
            bail!(Data, "empty codec batch");
        }
        xs.iter().try_for_each(|x| x.expect_layout(&self.image_grid, 1, "codec input"))
    }

    fn batch_tensor(xs: &[&Volume], channels: usize) -> Tensor {
        let mut shape = Vec::new();
        let mut data = Vec::new();
        for x in xs {
            let t = Self::slices(x, channels);
            shape = t.shape.clone();
            data.extend(t.data);
        }
        let per = shape[0];
        shape[0] = per * xs.len();
        Tensor::new(&shape, data)
    }

    fn raw_latent(&self, x: &Volume) -> Result<Volume> {
        x.expect_layout(&self.image_grid, 1, "encode input")?;
        let mut g = Graph::new(&self.params);
        let xi = g.input(Self::slices(x, 1));
        let z = self.enc_graph(&mut g, xi);
        Self::unslice(&g.into_value(z), self.latent_grid, self.config.latent_channels)
    }
}

impl LatentCodec for ConvAeCodec {
    fn kind(&self) -> CodecKind {
        CodecKind::ConvAe
    }
    fn image_grid(&self) -> VolumeGrid {
        self.image_grid
    }
    fn latent_grid(&self) -> VolumeGrid {
        self.latent_grid
    }
    fn channels(&self) -> usize {
        self.config.latent_channels
    }

    fn encode(&self, x: &Volume) -> Result<Volume> {
        let mut z = self.raw_latent(x)?;
        for c in 0..z.channels {
            let (m, s) = (self.shift[c], self.scale[c]);
            z.channel_mut(c).iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(z)
    }

    fn decode(&self, z: &Volume) -> Result<Volume> {
        z.expect_layout(&self.latent_grid, self.config.latent_channels, "decode input")?;
        let mut raw = z.clone();
        for c in 0..raw.channels {
            let (m, s) = (self.shift[c], self.scale[c]);
            raw.channel_mut(c).iter_mut().for_each(|v| *v = *v * s + m);
        }
        let mut g = Graph::new(&self.params);
        let zi = g.input(Self::slices(&raw, raw.channels));
        let x = self.dec_graph(&mut g, zi);
        let mut out = Self::unslice(&g.into_value(x), self.image_grid, 1)?;
        out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(out)
    }
}

/// Either shipped codec behind one type.
#[derive(Debug, Clone)]
pub enum Codec {
    Identity(IdentityCodec),
    ConvAe(ConvAeCodec),
}

impl LatentCodec for Codec {
    fn kind(&self) -> CodecKind {
        match self {
            Codec::Identity(c) => c.kind(),
            Codec::ConvAe(c) => c.kind(),
        }
    }
    fn image_grid(&self) -> VolumeGrid {
        match self {
            Codec::Identity(c) => c.image_grid(),
            Codec::ConvAe(c) => c.image_grid(),
        }
    }
    fn latent_grid(&self) -> VolumeGrid {
        match self {
            Codec::Identity(c) => c.latent_grid(),
            Codec::ConvAe(c) => c.latent_grid(),
        }
    }
    fn channels(&self) -> usize {
        match self {
            Codec::Identity(c) => c.channels(),
            Codec::ConvAe(c) => c.channels(),
        }
    }
    fn encode(&self, x: &Volume) -> Result<Volume> {
        match self {
            Codec::Identity(c) => c.encode(x),
            Codec::ConvAe(c) => c.encode(x),
        }
    }
    fn decode(&self, z: &Volume) -> Result<Volume> {
        match self {
            Codec::Identity(c) => c.decode(z),
            Codec::ConvAe(c) => c.decode(z),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecTrainConfig {
    pub kind: CodecKind,
    pub model: ConvAeConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            kind: CodecKind::ConvAe,
            model: ConvAeConfig::default(),
            steps: 1500,
            batch_size: 8,
            lr: 2e-3,
            eval_every: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecLogEntry {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct CodecTraining {
    pub codec: Codec,
    pub log: Vec<CodecLogEntry>,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
}

/// Mean reconstruction MSE over a set of images.
pub fn reconstruction_mse(codec: &impl LatentCodec, xs: &[Volume]) -> Result<f64> {
    if xs.is_empty() {
        bail!(Data, "no images to reconstruct");
    }
    let mut total = 0.0;
    for x in xs {
        let r = codec.decode(&codec.encode(x)?)?;
        total += x.data.iter().zip(&r.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    }
    Ok(total / xs.len() as f64)
}

fn ae_loss(codec: &ConvAeCodec, xs: &[&Volume]) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new(&codec.params);
    let t = ConvAeCodec::batch_tensor(xs, 1);
    let target = t.data.clone();
    let x = g.input(t);
    let z = codec.enc_graph(&mut g, x);
    let y = codec.dec_graph(&mut g, z);
    let l = g.mse(y, target);
    let loss = g.value(l).data[0];
    (loss, g.backward(l))
}

/// Train a codec on single-channel images. Validation loss is the
/// reconstruction MSE on `val`; the weights with the best validation loss
/// are returned.
pub fn train_codec(train: &[Volume], val: &[Volume], config: &CodecTrainConfig) -> Result<CodecTraining> {
    if train.is_empty() {
        bail!(Data, "codec training set is empty");
    }
    let grid = train[0].grid;
    if config.kind == CodecKind::Identity {
        train.iter().try_for_each(|x| x.expect_layout(&grid, 1, "codec training image"))?;
        return Ok(CodecTraining {
            codec: Codec::Identity(IdentityCodec::new(grid)),
            log: Vec::new(),
            initial_val_loss: 0.0,
            best_val_loss: 0.0,
        });
    }
    if config.batch_size == 0 || !(config.lr > 0.0) || config.eval_every == 0 {
        bail!(Config, "codec training needs batch_size >= 1, lr > 0, eval_every >= 1");
    }
    let val = if val.is_empty() { train } else { val };
    let mut codec = ConvAeCodec::new(grid, config.model, config.seed)?;
    codec.check_batch(train)?;
    codec.check_batch(val)?;
    let mut opt = Adam::new(&codec.params, config.lr);
    let mut r = rng::stream(config.seed, 1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let initial_val_loss = reconstruction_mse(&codec, val)?;
    let mut best = (initial_val_loss, codec.params.clone());
    let mut log = Vec::new();
    let mut running = 0.0;
    let mut running_n = 0usize;
    for step in 1..=config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                rng::shuffle(&mut r, &mut order);
                cursor = 0;
            }
            batch.push(&train[order[cursor]]);
            cursor += 1;
        }
        let (loss, mut grads) = ae_loss(&codec, &batch);
        if !loss.is_finite() {
            bail!(TrainingFailure, "codec loss became non-finite at step {}", step);
        }
        clip_grad_norm(&mut grads, 1.0);
        opt.step(&mut codec.params, &grads);
        running += loss;
        running_n += 1;
        if step % config.eval_every == 0 || step == config.steps {
            let val_loss = reconstruction_mse(&codec, val)?;
            if !val_loss.is_finite() {
                bail!(TrainingFailure, "codec validation loss became non-finite at step {}", step);
            }
            log.push(CodecLogEntry { step, train_loss: running / running_n as f64, val_loss });
            running = 0.0;
            running_n = 0;
            if val_loss < best.0 {
                best = (val_loss, codec.params.clone());
            }
        }
    }
    codec.params = best.1;
    // Standardise the latent space on the training set.
    let c = config.model.latent_channels;
    let mut sum = vec![0.0; c];
    let mut sq = vec![0.0; c];
    let mut count = 0.0;
    for x in train {
        let z = codec.raw_latent(x)?;
        for ch in 0..c {
            for &v in z.channel(ch) {
                sum[ch] += v;
                sq[ch] += v * v;
            }
        }
        count += z.grid.len() as f64;
    }
    for ch in 0..c {
        let m = sum[ch] / count;
        let var = (sq[ch] / count - m * m).max(1e-12);
        codec.shift[ch] = m;
        codec.scale[ch] = libm::sqrt(var);
    }
    Ok(CodecTraining { codec: Codec::ConvAe(codec), log, initial_val_loss, best_val_loss: best.0 })
}

impl core::fmt::Display for CodecKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64, grid: VolumeGrid) -> Volume {
        let mut r = rng::seeded(seed);
        let cx = rng::uniform_range(&mut r, 4.0, 12.0);
        let mut v = Volume::zeros(grid, 1);
        for i in 0..grid.len() {
            let [x, y, _] = grid.unravel(i);
            v.data[i] = if (x as f64 - cx).abs() < 3.0 { 0.8 } else { 0.2 } + 0.05 * (y as f64 / 16.0);
        }
        v
    }

    #[test]
    fn identity_round_trip_is_exact() {
        let grid = VolumeGrid::new_2d([16, 8], [1.0, 1.0], [0.0, 0.0]).unwrap();
        let c = IdentityCodec::new(grid);
        let x = image(1, grid);
        assert_eq!(c.decode(&c.encode(&x).unwrap()).unwrap(), x);
        let other = VolumeGrid::new_2d([8, 8], [1.0, 1.0], [0.0, 0.0]).unwrap();
        assert!(matches!(c.encode(&image(1, other)), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn conv_ae_shapes_and_extent() {
        let grid = VolumeGrid::new_2d([128, 64], [0.625, 0.625], [0.0, 0.0]).unwrap();
        let c = ConvAeCodec::new(grid, ConvAeConfig::default(), 0).unwrap();
        assert_eq!(c.latent_grid().shape(), [32, 16, 1]);
        assert!(c.latent_grid().same_extent(&grid, 1e-9));
        let z = c.encode(&Volume::zeros(grid, 1)).unwrap();
        assert_eq!(z.channels, 3);
        let x = c.decode(&Volume::zeros(c.latent_grid(), 3)).unwrap();
        assert_eq!(x.grid, grid);
        assert!(x.is_finite());

        let g3 = VolumeGrid::new_3d([16, 16, 3], [1.0, 1.0, 2.0], [0.0, 0.0, 0.0]).unwrap();
        let c3 = ConvAeCodec::new(g3, ConvAeConfig::default(), 0).unwrap();
        assert_eq!(c3.latent_grid().shape(), [4, 4, 3]);
        let x3 = Volume::from_data(g3, 1, rng::normal_vec(&mut rng::seeded(2), g3.len())).unwrap();
        let z3 = c3.encode(&x3).unwrap();
        assert_eq!(c3.encode(&x3).unwrap(), z3);
        assert_eq!(c3.decode(&z3).unwrap().grid, g3);
    }

    #[test]
    fn training_reduces_validation_loss() {
        let grid = VolumeGrid::new_2d([16, 16], [1.0, 1.0], [0.0, 0.0]).unwrap();
        let train: Vec<Volume> = (0..32).map(|i| image(i, grid)).collect();
        let val: Vec<Volume> = (100..108).map(|i| image(i, grid)).collect();
        let cfg = CodecTrainConfig { steps: 150, eval_every: 50, batch_size: 4, ..Default::default() };
        let out = train_codec(&train, &val, &cfg).unwrap();
        assert!(out.best_val_loss < out.initial_val_loss);
        assert!(out.log.iter().all(|e| e.val_loss.is_finite()));
        let again = train_codec(&train, &val, &cfg).unwrap();
        assert_eq!(out.log, again.log);
        let z = out.codec.encode(&train[0]).unwrap();
        let Codec::ConvAe(ae) = &out.codec else { panic!() };
        assert!(ae.latent_scale().iter().all(|s| *s > 0.0));
        assert_eq!(z.channels, 3);
    }

    #[test]
    fn identity_training_is_immediate_and_empty_is_error() {
        let grid = VolumeGrid::new_2d([8, 8], [1.0, 1.0], [0.0, 0.0]).unwrap();
        let cfg = CodecTrainConfig { kind: CodecKind::Identity, ..Default::default() };
        let out = train_codec(&[image(0, grid)], &[], &cfg).unwrap();
        assert!(out.log.is_empty());
        assert!(matches!(train_codec(&[], &[], &cfg), Err(crate::Error::Data(_))));
    }
}
