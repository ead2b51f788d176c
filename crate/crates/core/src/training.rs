//! Diffusion training with the weighted forward process.
//!
//! All three method variants share one loop and differ only in the weight
//! field each example carries: the Gaussian field (`weighted`), its
//! thresholded binary mask (`masked`), or a field of ones (`repaint-base`,
//! the unconditional model used by the RePaint baseline).

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Conditioning, DenoiserInput, NoisePredictor, UNetDenoiser};
use crate::error::{bail, Result};
use crate::geometry::{resample_weights, threshold_mask, Landmark, VolumeGrid, WeightField, WeightSpec};
use crate::nn::{clip_grad_norm, Adam, Graph, ParamStore};
use crate::rng::{self, Rng};
pub use crate::synthdata::Split;
use crate::schedule::{q_sample_weighted, voxel_timesteps, NoiseSchedule};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrainVariant {
    #[serde(rename = "weighted")]
    Weighted,
    #[serde(rename = "masked")]
    Masked,
    #[serde(rename = "repaint-base")]
    Standard,
}

impl TrainVariant {
    pub const ALL: [TrainVariant; 3] = [TrainVariant::Weighted, TrainVariant::Masked, TrainVariant::Standard];

    pub fn name(self) -> &'static str {
        match self {
            TrainVariant::Weighted => "weighted",
            TrainVariant::Masked => "masked",
            TrainVariant::Standard => "repaint-base",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

impl core::fmt::Display for TrainVariant {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// Weight field a variant uses on `latent_grid` for a landmark annotated on
/// `image_grid`.
pub fn variant_weights(
    variant: TrainVariant,
    landmark: &Landmark,
    image_grid: &VolumeGrid,
    latent_grid: &VolumeGrid,
    sigma_mm: f64,
    mask_tau: f64,
) -> Result<WeightField> {
    match variant {
        TrainVariant::Standard => Ok(WeightField::constant(*latent_grid, 1.0)),
        TrainVariant::Weighted => resample_weights(&WeightSpec::new(*landmark, sigma_mm, *image_grid)?, latent_grid),
        TrainVariant::Masked => {
            let w = resample_weights(&WeightSpec::new(*landmark, sigma_mm, *image_grid)?, latent_grid)?;
            Ok(threshold_mask(&w, mask_tau)?.to_weights())
        }
    }
}

/// One encoded training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub z0: Volume,
    pub w: WeightField,
    pub cond: Conditioning,
}

impl TrainExample {
    pub fn new(
        z0: Volume,
        landmark: Option<&Landmark>,
        image_grid: &VolumeGrid,
        variant: TrainVariant,
        sigma_mm: f64,
        mask_tau: f64,
    ) -> Result<Self> {
        let Some(lm) = landmark else {
            bail!(Data, "training example has no landmark");
        };
        let w = variant_weights(variant, lm, image_grid, &z0.grid, sigma_mm, mask_tau)?;
        Ok(Self { z0, w, cond: Conditioning::new(lm.level, lm.severity) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMask {
    /// Only voxels that received noise (`t_v >= 1`).
    NoisedVoxels,
    AllVoxels,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_steps: usize,
    pub eval_every: usize,
    /// Validations without improvement before stopping.
    pub patience: usize,
    pub grad_clip: f64,
    pub loss_mask: LossMask,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr: 1e-4,
            max_steps: 20_000,
            eval_every: 100,
            patience: 20,
            grad_clip: 1.0,
            loss_mask: LossMask::NoisedVoxels,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 || self.max_steps == 0 {
            bail!(Config, "batch_size, eval_every and max_steps must be at least 1");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            bail!(Config, "learning rate must be positive, got {}", self.lr);
        }
        if !(self.grad_clip > 0.0) {
            bail!(Config, "grad_clip must be positive");
        }
        Ok(())
    }
}

/// The random quantities of one loss evaluation.
#[derive(Debug, Clone)]
pub struct LossDraw {
    pub t: usize,
    pub x_t: Volume,
    pub noise: Volume,
    /// 1 where the voxel counts towards the loss, per channel.
    pub mask: Vec<f64>,
}

pub fn draw_loss_inputs(ex: &TrainExample, sched: &NoiseSchedule, rule: LossMask, rng: &mut Rng) -> Result<LossDraw> {
    let t = 1 + rng::below(rng, sched.num_train_steps());
    let tf = voxel_timesteps(&ex.w, t, sched)?;
    let noise = rng::normal_volume(rng, ex.z0.grid, ex.z0.channels);
    let x_t = q_sample_weighted(&ex.z0, &tf, sched, &noise)?;
    let n = ex.z0.grid.len();
    let mask = (0..ex.z0.len())
        .map(|i| match rule {
            LossMask::AllVoxels => 1.0,
            LossMask::NoisedVoxels => (tf.t_v[i % n] >= 1) as u8 as f64,
        })
        .collect();
    Ok(LossDraw { t, x_t, noise, mask })
}

/// Masked mean squared error between a noise prediction and the drawn noise.
pub fn masked_noise_mse(eps_hat: &Volume, draw: &LossDraw) -> f64 {
    let mut s = 0.0;
    let mut n = 0.0;
    for i in 0..eps_hat.len() {
        if draw.mask[i] != 0.0 {
            let d = eps_hat.data[i] - draw.noise.data[i];
            s += d * d;
            n += 1.0;
        }
    }
    if n > 0.0 {
        s / n
    } else {
        0.0
    }
}

/// Single-example epsilon-prediction loss with a fresh draw from `rng`.
pub fn training_loss(
    ex: &TrainExample,
    sched: &NoiseSchedule,
    model: &impl NoisePredictor,
    rule: LossMask,
    rng: &mut Rng,
) -> Result<f64> {
    let draw = draw_loss_inputs(ex, sched, rule, rng)?;
    let eps_hat = model.predict_noise(&draw.x_t, draw.t, &ex.w, &ex.cond)?;
    Ok(masked_noise_mse(&eps_hat, &draw))
}

fn batch_loss(model: &UNetDenoiser, batch: &[(&TrainExample, LossDraw)], grads: bool) -> Result<(f64, Option<Vec<crate::nn::Tensor>>)> {
    let inputs: Vec<DenoiserInput> = batch
        .iter()
        .map(|(ex, d)| DenoiserInput { z_t: &d.x_t, global_t: d.t, w: &ex.w, cond: &ex.cond })
        .collect();
    let mut g = Graph::new(model.params());
    let out = model.forward(&mut g, &inputs)?;
    let target = batch.iter().flat_map(|(_, d)| d.noise.data.iter().copied()).collect();
    let mask = batch.iter().flat_map(|(_, d)| d.mask.iter().copied()).collect();
    let l = g.masked_mse(out, target, mask);
    let loss = g.value(l).data[0];
    Ok((loss, grads.then(|| g.backward(l))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub split: Split,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: UNetDenoiser,
    pub log: Vec<LogEntry>,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub best_step: usize,
    pub steps_run: usize,
    pub stopped_early: bool,
}

/// Mean loss over a validation set with draws that depend only on `seed`
/// and the example index, so repeated calls are comparable.
pub fn validation_loss(model: &UNetDenoiser, val: &[TrainExample], sched: &NoiseSchedule, rule: LossMask, seed: u64) -> Result<f64> {
    if val.is_empty() {
        bail!(Data, "validation set is empty");
    }
    let vseed = rng::derive_seed(seed, 0x7661_6c69_6461_7465);
    let mut total = 0.0;
    for chunk in val.chunks(16).enumerate() {
        let (ci, exs) = chunk;
        let mut batch = Vec::with_capacity(exs.len());
        for (j, ex) in exs.iter().enumerate() {
            let mut r = rng::stream(vseed, (ci * 16 + j) as u64);
            batch.push((ex, draw_loss_inputs(ex, sched, rule, &mut r)?));
        }
        for item in &batch {
            total += batch_loss(model, core::slice::from_ref(item), false)?.0;
        }
    }
    Ok(total / val.len() as f64)
}

/// Called whenever the validation loss improves, with the new best weights.
pub type CheckpointHook<'a> = &'a mut dyn FnMut(usize, f64, &UNetDenoiser) -> Result<()>;

/// Train `model` in place on `train`, validating every `eval_every` steps.
/// Returns the best-validation weights; stops after `patience` validations
/// without improvement.
pub fn train(
    mut model: UNetDenoiser,
    train: &[TrainExample],
    val: &[TrainExample],
    sched: &NoiseSchedule,
    config: &TrainConfig,
    on_best: Option<CheckpointHook>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        bail!(Data, "training set is empty");
    }
    if val.is_empty() {
        bail!(Data, "validation set is empty");
    }
    let mut on_best = on_best;
    let mut opt = Adam::new(model.params(), config.lr);
    let mut r = rng::stream(config.seed, 2);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let initial_val_loss = validation_loss(&model, val, sched, config.loss_mask, config.seed)?;
    if !initial_val_loss.is_finite() {
        bail!(TrainingFailure, "initial validation loss is not finite");
    }
    let mut log = vec![LogEntry { step: 0, split: Split::Val, loss: initial_val_loss }];
    let mut best: (f64, usize, ParamStore) = (initial_val_loss, 0, model.params().clone());
    let mut since_best = 0;
    let mut running = 0.0;
    let mut running_n = 0usize;
    let mut steps_run = 0;
    let mut stopped_early = false;
    for step in 1..=config.max_steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                rng::shuffle(&mut r, &mut order);
                cursor = 0;
            }
            let ex = &train[order[cursor]];
            cursor += 1;
            batch.push((ex, draw_loss_inputs(ex, sched, config.loss_mask, &mut r)?));
        }
        let (loss, grads) = batch_loss(&model, &batch, true)?;
        let mut grads = grads.unwrap_or_default();
        let gn = clip_grad_norm(&mut grads, config.grad_clip);
        if !loss.is_finite() || !gn.is_finite() {
            model.set_params(best.2)?;
            bail!(TrainingFailure, "loss became non-finite at step {}; best weights from step {} retained", step, best.1);
        }
        opt.step(model.params_mut(), &grads);
        running += loss;
        running_n += 1;
        steps_run = step;
        if step % config.eval_every == 0 || step == config.max_steps {
            log.push(LogEntry { step, split: Split::Train, loss: running / running_n as f64 });
            running = 0.0;
            running_n = 0;
            let v = validation_loss(&model, val, sched, config.loss_mask, config.seed)?;
            if !v.is_finite() {
                bail!(TrainingFailure, "validation loss became non-finite at step {}", step);
            }
            log.push(LogEntry { step, split: Split::Val, loss: v });
            if v < best.0 {
                best = (v, step, model.params().clone());
                since_best = 0;
                if let Some(hook) = on_best.as_mut() {
                    hook(step, v, &model)?;
                }
            } else {
                since_best += 1;
                if since_best >= config.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    let (best_val_loss, best_step, params) = best;
    model.set_params(params)?;
    Ok(TrainOutcome { model, log, initial_val_loss, best_val_loss, best_step, steps_run, stopped_early })
}

/// Short label for logs, e.g. `weighted/DH`.
pub fn run_label(variant: TrainVariant, pathology: crate::geometry::Pathology) -> String {
    alloc::format!("{}/{}", variant.name(), pathology.name())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{CondMode, DenoiserConfig, LinearGaussianDenoiser};
    use crate::geometry::{Level, Severity};
    use crate::schedule::ScheduleParams;

    struct Oracle<'a>(&'a Volume, Option<f64>);

    impl NoisePredictor for Oracle<'_> {
        fn predict_noise(&self, _z: &Volume, _t: usize, w: &WeightField, _c: &Conditioning) -> Result<Volume> {
            let mut out = self.0.clone();
            if let Some(junk) = self.1 {
                let n = w.grid.len();
                for (i, v) in out.data.iter_mut().enumerate() {
                    if w.values[i % n] == 0.0 {
                        *v = junk;
                    }
                }
            }
            Ok(out)
        }
    }

    struct Zero;
    impl NoisePredictor for Zero {
        fn predict_noise(&self, z: &Volume, _t: usize, _w: &WeightField, _c: &Conditioning) -> Result<Volume> {
            Ok(Volume::zeros(z.grid, z.channels))
        }
    }

    fn grid() -> VolumeGrid {
        VolumeGrid::new_2d([16, 16], [5.0, 5.0], [0.0, 0.0]).unwrap()
    }

    fn example(seed: u64, variant: TrainVariant) -> TrainExample {
        let g = grid();
        let z0 = rng::normal_volume(&mut rng::seeded(seed), g, 3);
        let lm = Landmark::new([40.0, 35.0, 0.0], Level::L4L5, Severity::ModLarge);
        TrainExample::new(z0, Some(&lm), &g, variant, 16.0, 0.1).unwrap()
    }

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(ScheduleParams::default()).unwrap()
    }

    #[test]
    fn perfect_oracle_has_zero_loss_and_missing_landmark_errors() {
        let ex = example(1, TrainVariant::Weighted);
        let s = sched();
        let draw = draw_loss_inputs(&ex, &s, LossMask::NoisedVoxels, &mut rng::seeded(5)).unwrap();
        assert_eq!(masked_noise_mse(&draw.noise, &draw), 0.0);
        let err = TrainExample::new(ex.z0.clone(), None, &grid(), TrainVariant::Weighted, 16.0, 0.1).unwrap_err();
        assert!(matches!(err, crate::Error::Data(_)));
    }

    #[test]
    fn zero_prediction_loss_tends_to_unit_variance() {
        let ex = example(2, TrainVariant::Standard);
        let s = sched();
        let mut r = rng::seeded(9);
        let mut total = 0.0;
        let mut voxels = 0usize;
        while voxels < 20_000 {
            total += training_loss(&ex, &s, &Zero, LossMask::NoisedVoxels, &mut r).unwrap() * ex.z0.len() as f64;
            voxels += ex.z0.len();
        }
        let mean = total / voxels as f64;
        assert!((mean - 1.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn unnoised_voxels_never_contribute() {
        let ex = example(3, TrainVariant::Masked);
        let s = sched();
        for seed in 0..20 {
            let draw = draw_loss_inputs(&ex, &s, LossMask::NoisedVoxels, &mut rng::seeded(seed)).unwrap();
            let clean = Oracle(&draw.noise, None).predict_noise(&draw.x_t, draw.t, &ex.w, &ex.cond).unwrap();
            let junk = Oracle(&draw.noise, Some(1e6)).predict_noise(&draw.x_t, draw.t, &ex.w, &ex.cond).unwrap();
            assert_ne!(clean, junk);
            assert_eq!(masked_noise_mse(&clean, &draw), masked_noise_mse(&junk, &draw));
        }
    }

    #[test]
    fn unit_weights_reduce_to_standard_loss() {
        let ex = example(4, TrainVariant::Standard);
        let s = sched();
        let draw = draw_loss_inputs(&ex, &s, LossMask::NoisedVoxels, &mut rng::seeded(1)).unwrap();
        assert!(draw.mask.iter().all(|&m| m == 1.0));
        let ab = s.alpha_bar(draw.t);
        for i in 0..ex.z0.len() {
            let e = ab.sqrt() * ex.z0.data[i] + (1.0 - ab).sqrt() * draw.noise.data[i];
            assert_eq!(draw.x_t.data[i], e);
        }
        let model = LinearGaussianDenoiser::new(s.clone(), 1.0);
        let a = training_loss(&ex, &s, &model, LossMask::NoisedVoxels, &mut rng::seeded(1)).unwrap();
        let b = training_loss(&ex, &s, &model, LossMask::AllVoxels, &mut rng::seeded(1)).unwrap();
        assert_eq!(a, b);
    }

    fn tiny_model() -> UNetDenoiser {
        let cfg = DenoiserConfig {
            latent_channels: 3,
            base_width: 8,
            depth: 2,
            time_embed_dim: 8,
            cond_dim: 8,
            cond_mode: CondMode::Additive,
            groups: 2,
            ..Default::default()
        };
        UNetDenoiser::new(cfg, 1).unwrap()
    }

    #[test]
    fn smoke_run_is_deterministic_and_improves() {
        let train_set: Vec<TrainExample> = (0..64).map(|i| example(100 + i, TrainVariant::Weighted)).collect();
        let val: Vec<TrainExample> = (0..8).map(|i| example(900 + i, TrainVariant::Weighted)).collect();
        let s = sched();
        let cfg = TrainConfig { batch_size: 4, lr: 1e-3, max_steps: 200, eval_every: 50, ..Default::default() };
        let mut hits = 0;
        let mut hook = |_: usize, _: f64, _: &UNetDenoiser| -> Result<()> {
            hits += 1;
            Ok(())
        };
        let a = train(tiny_model(), &train_set, &val, &s, &cfg, Some(&mut hook)).unwrap();
        let b = train(tiny_model(), &train_set, &val, &s, &cfg, None).unwrap();
        assert_eq!(a.log, b.log);
        assert!(a.best_val_loss.is_finite());
        assert!(a.best_val_loss < a.initial_val_loss);
        assert!(hits >= 1);
        assert_eq!(a.model.params().tensors(), b.model.params().tensors());
    }

    #[test]
    fn empty_dataset_is_a_data_error() {
        let s = sched();
        let val = [example(1, TrainVariant::Weighted)];
        let err = train(tiny_model(), &[], &val, &s, &TrainConfig::default(), None).unwrap_err();
        assert!(matches!(err, crate::Error::Data(_)));
    }
}
