//! Noise-prediction networks.
//!
//! [`NoisePredictor`] is the interface the samplers and the training loss
//! consume. Two implementations ship: the trainable [`UNetDenoiser`] and the
//! closed-form [`LinearGaussianDenoiser`], which is the Bayes-optimal
//! predictor for a zero-mean Gaussian prior and serves as a sampler oracle.
//!
//! The U-Net sees the noisy latent with the weight field concatenated as one
//! extra channel per slice, the global timestep through a sinusoidal
//! embedding, and the level/severity one-hots through a small encoder whose
//! output token is read by cross attention at the coarsest resolution.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::geometry::{Level, Severity, WeightField};
use crate::nn::{Conv2d, CrossAttention, GroupNorm, Graph, Linear, ParamStore, ResBlock, Tensor, Var};
use crate::rng;
use crate::schedule::{voxel_timestep, NoiseSchedule};
use crate::volume::Volume;

pub const NUM_LEVELS: usize = 5;
pub const NUM_SEVERITIES: usize = 2;

/// Level and severity one-hot vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conditioning {
    pub level_onehot: [f64; NUM_LEVELS],
    pub severity_onehot: [f64; NUM_SEVERITIES],
}

impl Conditioning {
    pub fn new(level: Level, severity: Severity) -> Self {
        let mut level_onehot = [0.0; NUM_LEVELS];
        level_onehot[level.index()] = 1.0;
        let mut severity_onehot = [0.0; NUM_SEVERITIES];
        severity_onehot[severity.rank()] = 1.0;
        Self { level_onehot, severity_onehot }
    }

    pub fn is_valid(&self) -> bool {
        let ok = |v: &[f64]| v.iter().all(|&x| x == 0.0 || x == 1.0) && v.iter().sum::<f64>() == 1.0;
        ok(&self.level_onehot) && ok(&self.severity_onehot)
    }

    pub fn concat(&self) -> [f64; NUM_LEVELS + NUM_SEVERITIES] {
        let mut out = [0.0; NUM_LEVELS + NUM_SEVERITIES];
        out[..NUM_LEVELS].copy_from_slice(&self.level_onehot);
        out[NUM_LEVELS..].copy_from_slice(&self.severity_onehot);
        out
    }
}

/// Predicts the noise that was mixed into `z_t`.
pub trait NoisePredictor {
    fn predict_noise(&self, z_t: &Volume, global_t: usize, w: &WeightField, cond: &Conditioning) -> Result<Volume>;
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn predict_noise(&self, z_t: &Volume, global_t: usize, w: &WeightField, cond: &Conditioning) -> Result<Volume> {
        (**self).predict_noise(z_t, global_t, w, cond)
    }
}

/// Bayes-optimal predictor when every latent voxel is an independent
/// `N(0, prior_var)` variable: `eps_hat = x_t sqrt(1 - abar) / (abar prior_var + 1 - abar)`,
/// evaluated at each voxel's own timestep `round(W_v t)`.
#[derive(Debug, Clone)]
pub struct LinearGaussianDenoiser {
    pub schedule: NoiseSchedule,
    pub prior_var: f64,
}

impl LinearGaussianDenoiser {
    pub fn new(schedule: NoiseSchedule, prior_var: f64) -> Self {
        Self { schedule, prior_var }
    }

    pub fn coefficient(&self, t_v: usize) -> f64 {
        let ab = self.schedule.alpha_bar(t_v);
        libm::sqrt(1.0 - ab) / (ab * self.prior_var + 1.0 - ab)
    }
}

impl NoisePredictor for LinearGaussianDenoiser {
    fn predict_noise(&self, z_t: &Volume, global_t: usize, w: &WeightField, _cond: &Conditioning) -> Result<Volume> {
        if w.grid != z_t.grid {
            bail!(Shape, "weight field and latent grids differ");
        }
        if global_t > self.schedule.num_train_steps() {
            bail!(InvalidParameter, "timestep {} exceeds T", global_t);
        }
        let n = z_t.grid.len();
        let mut out = z_t.clone();
        for (i, v) in out.data.iter_mut().enumerate() {
            *v *= self.coefficient(voxel_timestep(w.values[i % n], global_t));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondMode {
    CrossAttention,
    Additive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Latent channels per slice.
    pub latent_channels: usize,
    /// Number of slices folded into the channel axis (1 for 2-D).
    pub slices: usize,
    pub base_width: usize,
    /// Number of resolutions; each extra level halves the spatial size.
    pub depth: usize,
    pub time_embed_dim: usize,
    pub cond_dim: usize,
    pub cond_mode: CondMode,
    pub groups: usize,
    pub max_timestep: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 3,
            slices: 1,
            base_width: 16,
            depth: 2,
            time_embed_dim: 32,
            cond_dim: 32,
            cond_mode: CondMode::CrossAttention,
            groups: 4,
            max_timestep: 1000,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.latent_channels,
            self.slices,
            self.base_width,
            self.depth,
            self.time_embed_dim,
            self.cond_dim,
            self.groups,
            self.max_timestep,
        ];
        if dims.iter().any(|&d| d == 0) {
            bail!(Config, "denoiser dimensions must all be positive: {:?}", self);
        }
        if self.time_embed_dim % 2 != 0 {
            bail!(Config, "time embedding dimension must be even");
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        (self.latent_channels + 1) * self.slices
    }

    pub fn out_channels(&self) -> usize {
        self.latent_channels * self.slices
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Receptive field in latent voxels at full resolution.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1usize;
        let mut jump = 1usize;
        let conv = |rf: &mut usize, jump: &mut usize, stride: usize| {
            *rf += 2 * *jump;
            *jump *= stride;
        };
        conv(&mut rf, &mut jump, 1);
        for level in 0..self.depth {
            conv(&mut rf, &mut jump, 1);
            conv(&mut rf, &mut jump, 1);
            if level + 1 < self.depth {
                conv(&mut rf, &mut jump, 2);
            }
        }
        conv(&mut rf, &mut jump, 1);
        conv(&mut rf, &mut jump, 1);
        for _ in (0..self.depth - 1).rev() {
            jump /= 2;
            conv(&mut rf, &mut jump, 1);
            conv(&mut rf, &mut jump, 1);
            conv(&mut rf, &mut jump, 1);
        }
        conv(&mut rf, &mut jump, 1);
        rf
    }
}

/// Sinusoidal embedding of a scalar timestep.
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * i as f64 / half as f64);
        out[i] = libm::sin(t * freq);
        out[half + i] = libm::cos(t * freq);
    }
    out
}

#[derive(Debug, Clone)]
struct UNetLayers {
    time1: Linear,
    time2: Linear,
    cond1: Linear,
    cond2: Linear,
    cond_add: Option<Linear>,
    conv_in: Conv2d,
    down_blocks: Vec<ResBlock>,
    downsamples: Vec<Conv2d>,
    mid: ResBlock,
    mid_attn: Option<CrossAttention>,
    upsamples: Vec<Conv2d>,
    up_blocks: Vec<ResBlock>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

/// One batch element of a denoiser forward pass.
pub struct DenoiserInput<'a> {
    pub z_t: &'a Volume,
    pub global_t: usize,
    pub w: &'a WeightField,
    pub cond: &'a Conditioning,
}

/// Small conditional U-Net noise predictor.
#[derive(Debug, Clone)]
pub struct UNetDenoiser {
    config: DenoiserConfig,
    layers: UNetLayers,
    params: ParamStore,
    initialized: bool,
}

impl UNetDenoiser {
    /// Build the parameter layout without usable weights; prediction fails
    /// with a state error until weights are loaded.
    pub fn uninitialized(config: DenoiserConfig) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.initialized = false;
        Ok(m)
    }

    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(seed);
        let r = &mut r;
        let mut s = ParamStore::new();
        let e = config.time_embed_dim * 2;
        let g = config.groups;
        let time1 = Linear::new(&mut s, "time.0", config.time_embed_dim, e, 1.0, r);
        let time2 = Linear::new(&mut s, "time.1", e, e, 1.0, r);
        let nc = NUM_LEVELS + NUM_SEVERITIES;
        let cond1 = Linear::new(&mut s, "cond.0", nc, config.cond_dim, 1.0, r);
        let cond2 = Linear::new(&mut s, "cond.1", config.cond_dim, config.cond_dim, 1.0, r);
        let cond_add = (config.cond_mode == CondMode::Additive)
            .then(|| Linear::new(&mut s, "cond.add", config.cond_dim, e, 1.0, r));
        let conv_in = Conv2d::new(&mut s, "conv_in", config.in_channels(), config.width(0), 3, 1, 1.0, r);
        let mut down_blocks = Vec::new();
        let mut downsamples = Vec::new();
        for level in 0..config.depth {
            let wd = config.width(level);
            down_blocks.push(ResBlock::new(&mut s, &format!("down.{level}"), wd, wd, Some(e), g, r));
            if level + 1 < config.depth {
                downsamples.push(Conv2d::new(&mut s, &format!("downsample.{level}"), wd, config.width(level + 1), 3, 2, 1.0, r));
            }
        }
        let wl = config.width(config.depth - 1);
        let mid = ResBlock::new(&mut s, "mid", wl, wl, Some(e), g, r);
        let mid_attn = (config.cond_mode == CondMode::CrossAttention)
            .then(|| CrossAttention::new(&mut s, "mid.attn", wl, config.cond_dim, wl, g, r));
        let mut upsamples = Vec::new();
        let mut up_blocks = Vec::new();
        for level in (0..config.depth).rev() {
            let wd = config.width(level);
            if level + 1 < config.depth {
                upsamples.push(Conv2d::new(&mut s, &format!("upsample.{level}"), config.width(level + 1), wd, 3, 1, 1.0, r));
            }
            up_blocks.push(ResBlock::new(&mut s, &format!("up.{level}"), 2 * wd, wd, Some(e), g, r));
        }
        let norm_out = GroupNorm::new(&mut s, "norm_out", config.width(0), g);
        let conv_out = Conv2d::new(&mut s, "conv_out", config.width(0), config.out_channels(), 3, 1, 0.1, r);
        let layers = UNetLayers {
            time1,
            time2,
            cond1,
            cond2,
            cond_add,
            conv_in,
            down_blocks,
            downsamples,
            mid,
            mid_attn,
            upsamples,
            up_blocks,
            norm_out,
            conv_out,
        };
        Ok(Self { config, layers, params: s, initialized: true })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamStore) -> Result<()> {
        let named = params.names().iter().cloned().zip(params.tensors().iter().cloned()).collect();
        self.params.load(named)?;
        self.initialized = true;
        Ok(())
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    fn check_input(&self, x: &DenoiserInput) -> Result<()> {
        if !self.initialized {
            bail!(State, "denoiser weights are not initialised");
        }
        let c = &self.config;
        if x.z_t.channels != c.latent_channels || x.z_t.grid.nz() != c.slices {
            bail!(
                Shape,
                "latent has {} channels x {} slices, model expects {} x {}",
                x.z_t.channels,
                x.z_t.grid.nz(),
                c.latent_channels,
                c.slices
            );
        }
        if x.w.grid != x.z_t.grid {
            bail!(Shape, "weight field grid differs from latent grid");
        }
        if x.global_t > c.max_timestep {
            bail!(InvalidParameter, "timestep {} exceeds {}", x.global_t, c.max_timestep);
        }
        let depth_factor = 1usize << (c.depth - 1);
        if x.z_t.grid.nx() % depth_factor != 0 || x.z_t.grid.ny() % depth_factor != 0 {
            bail!(Shape, "latent in-plane size must be divisible by {}", depth_factor);
        }
        Ok(())
    }

    /// Record the forward pass for a batch and return the output node
    /// (`[n, latent_channels * slices, ny, nx]`).
    pub fn forward(&self, g: &mut Graph, batch: &[DenoiserInput]) -> Result<Var> {
        if batch.is_empty() {
            bail!(Data, "empty denoiser batch");
        }
        for x in batch {
            self.check_input(x)?;
        }
        let c = &self.config;
        let grid = batch[0].z_t.grid;
        let (nx, ny) = (grid.nx(), grid.ny());
        let n = batch.len();
        let mut inp = Vec::with_capacity(n * c.in_channels() * nx * ny);
        let mut temb = Vec::with_capacity(n * c.time_embed_dim);
        let mut cond = Vec::with_capacity(n * (NUM_LEVELS + NUM_SEVERITIES));
        for x in batch {
            if x.z_t.grid != grid {
                bail!(Shape, "batch elements must share a grid");
            }
            inp.extend_from_slice(&x.z_t.data);
            inp.extend_from_slice(&x.w.values);
            temb.extend(timestep_embedding(x.global_t as f64, c.time_embed_dim));
            cond.extend_from_slice(&x.cond.concat());
        }
        let l = &self.layers;
        let x = g.input(Tensor::new(&[n, c.in_channels(), ny, nx], inp));
        let t = g.input(Tensor::new(&[n, c.time_embed_dim], temb));
        let cv = g.input(Tensor::new(&[n, NUM_LEVELS + NUM_SEVERITIES], cond));

        let e = l.time1.forward(g, t);
        let e = g.silu(e);
        let mut e = l.time2.forward(g, e);
        let ctx = l.cond1.forward(g, cv);
        let ctx = g.silu(ctx);
        let ctx = l.cond2.forward(g, ctx);
        if let Some(add) = &l.cond_add {
            let ce = add.forward(g, ctx);
            e = g.add(e, ce);
        }
        let emb = g.silu(e);

        let mut h = l.conv_in.forward(g, x);
        let mut skips = Vec::with_capacity(c.depth);
        for level in 0..c.depth {
            h = l.down_blocks[level].forward(g, h, Some(emb));
            skips.push(h);
            if level + 1 < c.depth {
                h = l.downsamples[level].forward(g, h);
            }
        }
        h = l.mid.forward(g, h, Some(emb));
        if let Some(attn) = &l.mid_attn {
            let ctx3 = g.reshape(ctx, &[n, 1, c.cond_dim]);
            h = attn.forward(g, h, ctx3);
        }
        let mut up = 0;
        for (i, level) in (0..c.depth).rev().enumerate() {
            if level + 1 < c.depth {
                h = g.upsample2x(h);
                h = l.upsamples[up].forward(g, h);
                up += 1;
            }
            let skip = skips[level];
            h = g.concat(h, skip);
            h = l.up_blocks[i].forward(g, h, Some(emb));
        }
        let h = l.norm_out.forward(g, h);
        let h = g.silu(h);
        Ok(l.conv_out.forward(g, h))
    }

    pub fn predict_batch(&self, batch: &[DenoiserInput]) -> Result<Vec<Volume>> {
        let mut g = Graph::new(&self.params);
        let out = self.forward(&mut g, batch)?;
        let t = g.into_value(out);
        let per = t.len() / batch.len();
        let mut res = Vec::with_capacity(batch.len());
        for (i, x) in batch.iter().enumerate() {
            res.push(Volume::from_data(x.z_t.grid, self.config.latent_channels, t.data[i * per..(i + 1) * per].to_vec())?);
        }
        if res.iter().any(|v| !v.is_finite()) {
            bail!(Numerical, "denoiser produced non-finite output");
        }
        Ok(res)
    }
}

impl NoisePredictor for UNetDenoiser {
    fn predict_noise(&self, z_t: &Volume, global_t: usize, w: &WeightField, cond: &Conditioning) -> Result<Volume> {
        let mut out = self.predict_batch(&[DenoiserInput { z_t, global_t, w, cond }])?;
        Ok(out.pop().unwrap())
    }
}
