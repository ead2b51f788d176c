//! Reverse-process inference.
//!
//! One engine drives every sampler. Each voxel is advanced between its own
//! effective timesteps `round(W_v t_k) -> round(W_v t_{k+1})`; a voxel whose
//! effective timestep does not change is passed through untouched. Without a
//! weight field every voxel follows the global ladder, which is the textbook
//! sampler.
//!
//! Three schedulers are available: DDPM ancestral sampling, deterministic
//! DDIM-style transfer, and PNDM (three pseudo Runge-Kutta warm-up steps
//! followed by the fourth-order linear multistep update).

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::codec::LatentCodec;
use crate::denoiser::{Conditioning, NoisePredictor};
use crate::error::{bail, Result};
use crate::geometry::{
    threshold_mask, BinaryMask, Landmark, Severity, WeightField, DEFAULT_MASK_TAU, DEFAULT_SIGMA_MM,
};
use crate::rng::{self, Rng};
use crate::schedule::{q_sample_weighted, voxel_timestep, voxel_timesteps, NoiseSchedule, TimestepField};
use crate::training::{variant_weights, TrainVariant};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Weighted,
    Repaint,
    Masked,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Repaint, Method::Masked, Method::Weighted];

    pub fn name(self) -> &'static str {
        match self {
            Method::Weighted => "weighted",
            Method::Repaint => "repaint",
            Method::Masked => "masked",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Training variant whose checkpoint this method samples from.
    pub fn train_variant(self) -> TrainVariant {
        match self {
            Method::Weighted => TrainVariant::Weighted,
            Method::Repaint => TrainVariant::Standard,
            Method::Masked => TrainVariant::Masked,
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Method::Weighted => "Weighted",
            Method::Repaint => "RePaint",
            Method::Masked => "Masked",
        }
    }
}

impl core::fmt::Display for Method {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    DdpmAncestral,
    Ddim,
    Pndm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub method: Method,
    pub num_inference_steps: usize,
    pub scheduler: Scheduler,
    pub seed: u64,
    pub sigma_mm: f64,
    pub mask_tau: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            method: Method::Weighted,
            num_inference_steps: 50,
            scheduler: Scheduler::Pndm,
            seed: 0,
            sigma_mm: DEFAULT_SIGMA_MM,
            mask_tau: DEFAULT_MASK_TAU,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        let n = self.num_inference_steps;
        if n == 0 || n > sched.num_train_steps() {
            bail!(Config, "num_inference_steps must lie in 1..={}, got {}", sched.num_train_steps(), n);
        }
        if self.scheduler == Scheduler::Pndm && n < 4 {
            bail!(Config, "PNDM needs at least 4 inference steps, got {}", n);
        }
        Ok(())
    }
}

/// `t_k = round((n - k) T / n)` for `k = 0..=n`; starts at `T`, ends at 0.
pub fn inference_ladder(num_train_steps: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > num_train_steps {
        bail!(Config, "num_inference_steps must lie in 1..={}, got {}", num_train_steps, n);
    }
    Ok((0..=n).map(|k| ((n - k) * num_train_steps * 2 + n) / (2 * n)).collect())
}

/// Source of the Gaussian noise volumes consumed by the samplers.
pub trait NoiseSource {
    fn draw(&mut self, like: &Volume) -> Volume;
}

impl NoiseSource for Rng {
    fn draw(&mut self, like: &Volume) -> Volume {
        rng::normal_volume(self, like.grid, like.channels)
    }
}

/// Every draw is exactly zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn draw(&mut self, like: &Volume) -> Volume {
        Volume::zeros(like.grid, like.channels)
    }
}

/// `x0` estimate from a noisy value and its predicted noise.
#[inline]
pub fn predict_x0(x: f64, eps: f64, ab: f64) -> f64 {
    (x - libm::sqrt(1.0 - ab) * eps) / libm::sqrt(ab)
}

/// Ancestral DDPM posterior sample from `abar_a` (noisier) to `abar_b`.
#[inline]
pub fn ddpm_posterior(x: f64, eps: f64, ab_a: f64, ab_b: f64, noise: f64) -> f64 {
    let x0 = predict_x0(x, eps, ab_a);
    let alpha = ab_a / ab_b;
    let beta = 1.0 - alpha;
    let mean = libm::sqrt(ab_b) * beta / (1.0 - ab_a) * x0 + libm::sqrt(alpha) * (1.0 - ab_b) / (1.0 - ab_a) * x;
    let var = (1.0 - ab_b) / (1.0 - ab_a) * beta;
    if var > 0.0 {
        mean + libm::sqrt(var) * noise
    } else {
        mean
    }
}

/// Deterministic transfer of PNDM (equivalently the DDIM step).
#[inline]
pub fn pndm_transfer(x: f64, eps: f64, ab: f64, ab_next: f64) -> f64 {
    let denom = libm::sqrt(ab) * (libm::sqrt((1.0 - ab_next) * ab) + libm::sqrt((1.0 - ab) * ab_next));
    libm::sqrt(ab_next / ab) * x - (ab_next - ab) / denom * eps
}

/// Effective timesteps of every voxel at global step `t`.
fn effective(w: Option<&WeightField>, like: &Volume, t: usize, sched: &NoiseSchedule) -> Result<TimestepField> {
    match w {
        Some(w) => voxel_timesteps(w, t, sched),
        None => Ok(TimestepField::uniform(like.grid, t)),
    }
}

fn check_monotone(a: &TimestepField, b: &TimestepField) -> Result<()> {
    if a.t_v.iter().zip(&b.t_v).any(|(x, y)| y > x) {
        bail!(Schedule, "effective timestep increased between steps {} -> {}", a.global_t, b.global_t);
    }
    Ok(())
}

/// Apply `f(x, eps, abar_from, abar_to, noise)` at every voxel whose
/// effective timestep changes; other voxels are copied unchanged.
fn per_voxel(
    z: &Volume,
    eps: &Volume,
    from: &TimestepField,
    to: &TimestepField,
    sched: &NoiseSchedule,
    noise: Option<&Volume>,
    f: impl Fn(f64, f64, f64, f64, f64) -> f64,
) -> Result<Volume> {
    if !z.same_layout(eps) || from.grid != z.grid || to.grid != z.grid {
        bail!(Shape, "sampler fields do not share the latent grid");
    }
    check_monotone(from, to)?;
    let n = z.grid.len();
    let mut out = z.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        let (a, b) = (from.t_v[i % n], to.t_v[i % n]);
        if a != b {
            let nz = noise.map_or(0.0, |nv| nv.data[i]);
            *v = f(*v, eps.data[i], sched.alpha_bar(a), sched.alpha_bar(b), nz);
        }
    }
    Ok(out)
}

/// One ancestral step `t_from -> t_to` with a per-voxel timestep field.
pub fn ddpm_step_weighted(
    z_t: &Volume,
    eps_hat: &Volume,
    t_from: usize,
    t_to: usize,
    w: &WeightField,
    sched: &NoiseSchedule,
    noise: &mut dyn NoiseSource,
) -> Result<Volume> {
    if t_from <= t_to {
        bail!(InvalidParameter, "ddpm step needs t_from > t_to, got {} -> {}", t_from, t_to);
    }
    let from = voxel_timesteps(w, t_from, sched)?;
    let to = voxel_timesteps(w, t_to, sched)?;
    let nv = noise.draw(z_t);
    per_voxel(z_t, eps_hat, &from, &to, sched, Some(&nv), ddpm_posterior)
}

/// What the engine reports after every ladder step.
pub struct StepEvent<'a> {
    pub step: usize,
    pub t_from: usize,
    pub t_to: usize,
    pub z: &'a Volume,
    /// For RePaint: the noised original that outside-mask voxels were set to.
    pub known: Option<&'a Volume>,
}

pub type StepObserver<'a> = &'a mut dyn FnMut(&StepEvent);

/// Invoked after each step with `(t_to, state, noise)`; may rewrite the state.
type PostStep<'a> = &'a mut dyn FnMut(usize, &mut Volume, &mut dyn NoiseSource) -> Result<Option<Volume>>;

struct Engine<'a, P: NoisePredictor + ?Sized> {
    model: &'a P,
    sched: &'a NoiseSchedule,
    w: Option<&'a WeightField>,
    /// Weight field shown to the network.
    w_input: WeightField,
    cond: &'a Conditioning,
}

impl<P: NoisePredictor + ?Sized> Engine<'_, P> {
    fn eps(&self, z: &Volume, t: usize) -> Result<Volume> {
        let e = self.model.predict_noise(z, t, &self.w_input, self.cond)?;
        if !e.same_layout(z) {
            bail!(Shape, "noise prediction has the wrong layout");
        }
        Ok(e)
    }

    fn field(&self, z: &Volume, t: usize) -> Result<TimestepField> {
        effective(self.w, z, t, self.sched)
    }

    fn transfer(&self, z: &Volume, eps: &Volume, t: usize, t_next: usize) -> Result<Volume> {
        let from = self.field(z, t)?;
        let to = self.field(z, t_next)?;
        per_voxel(z, eps, &from, &to, self.sched, None, |x, e, a, b, _| pndm_transfer(x, e, a, b))
    }

    fn run(
        &self,
        z_start: Volume,
        ladder: &[usize],
        scheduler: Scheduler,
        noise: &mut dyn NoiseSource,
        mut post: Option<PostStep>,
        mut observer: Option<StepObserver>,
    ) -> Result<Volume> {
        let mut z = z_start;
        let mut history: Vec<Volume> = Vec::new();
        for k in 0..ladder.len() - 1 {
            let (t, t_next) = (ladder[k], ladder[k + 1]);
            z = match scheduler {
                Scheduler::DdpmAncestral => {
                    let eps = self.eps(&z, t)?;
                    let from = self.field(&z, t)?;
                    let to = self.field(&z, t_next)?;
                    let nv = noise.draw(&z);
                    per_voxel(&z, &eps, &from, &to, self.sched, Some(&nv), ddpm_posterior)?
                }
                Scheduler::Ddim => {
                    let eps = self.eps(&z, t)?;
                    self.transfer(&z, &eps, t, t_next)?
                }
                Scheduler::Pndm if k < 3 => {
                    let t_mid = (t + t_next) / 2;
                    let e1 = self.eps(&z, t)?;
                    let x1 = self.transfer(&z, &e1, t, t_mid)?;
                    let e2 = self.eps(&x1, t_mid)?;
                    let x2 = self.transfer(&z, &e2, t, t_mid)?;
                    let e3 = self.eps(&x2, t_mid)?;
                    let x3 = self.transfer(&z, &e3, t, t_next)?;
                    let e4 = self.eps(&x3, t_next)?;
                    let mut combined = e1.clone();
                    for i in 0..combined.data.len() {
                        combined.data[i] = (e1.data[i] + 2.0 * e2.data[i] + 2.0 * e3.data[i] + e4.data[i]) / 6.0;
                    }
                    history.push(e1);
                    self.transfer(&z, &combined, t, t_next)?
                }
                Scheduler::Pndm => {
                    let e = self.eps(&z, t)?;
                    let n = history.len();
                    let (e1, e2, e3) = (&history[n - 1], &history[n - 2], &history[n - 3]);
                    let mut combined = e.clone();
                    for i in 0..combined.data.len() {
                        combined.data[i] =
                            (55.0 * e.data[i] - 59.0 * e1.data[i] + 37.0 * e2.data[i] - 9.0 * e3.data[i]) / 24.0;
                    }
                    history.push(e);
                    if history.len() > 4 {
                        history.remove(0);
                    }
                    self.transfer(&z, &combined, t, t_next)?
                }
            };
            let known = match post.as_mut() {
                Some(f) => f(t_next, &mut z, noise)?,
                None => None,
            };
            if let Some(obs) = observer.as_mut() {
                obs(&StepEvent { step: k, t_from: t, t_to: t_next, z: &z, known: known.as_ref() });
            }
        }
        if !z.is_finite() {
            bail!(Numerical, "sampler produced non-finite latents");
        }
        Ok(z)
    }
}

/// Reverse process from `z_start` at `ladder[0]` down to 0 with per-voxel
/// timesteps from `w` (`None`: every voxel follows the global ladder and the
/// network sees a weight field of ones).
#[allow(clippy::too_many_arguments)]
pub fn reverse_process<P: NoisePredictor + ?Sized>(
    model: &P,
    z_start: Volume,
    w: Option<&WeightField>,
    cond: &Conditioning,
    sched: &NoiseSchedule,
    ladder: &[usize],
    scheduler: Scheduler,
    noise: &mut dyn NoiseSource,
    observer: Option<StepObserver>,
) -> Result<Volume> {
    if ladder.len() < 2 || ladder.windows(2).any(|p| p[0] <= p[1]) || *ladder.last().unwrap() != 0 {
        bail!(Config, "inference ladder must be strictly decreasing and end at 0");
    }
    if scheduler == Scheduler::Pndm && ladder.len() < 5 {
        bail!(Config, "PNDM needs at least 4 inference steps");
    }
    if ladder[0] > sched.num_train_steps() {
        bail!(Config, "ladder starts above T");
    }
    if let Some(w) = w {
        if w.grid != z_start.grid {
            bail!(Shape, "weight field grid differs from latent grid");
        }
    }
    let w_input = w.cloned().unwrap_or_else(|| WeightField::constant(z_start.grid, 1.0));
    let engine = Engine { model, sched, w, w_input, cond };
    engine.run(z_start, ladder, scheduler, noise, None, observer)
}

/// PNDM reverse process.
pub fn pndm_sample<P: NoisePredictor + ?Sized>(
    z_start: Volume,
    model: &P,
    w: &WeightField,
    cond: &Conditioning,
    sched: &NoiseSchedule,
    num_inference_steps: usize,
) -> Result<Volume> {
    if num_inference_steps < 4 {
        bail!(Config, "PNDM needs at least 4 inference steps, got {}", num_inference_steps);
    }
    let ladder = inference_ladder(sched.num_train_steps(), num_inference_steps)?;
    reverse_process(model, z_start, Some(w), cond, sched, &ladder, Scheduler::Pndm, &mut ZeroNoise, None)
}

/// Pick an insertion point uniformly inside `region` (uniform voxel, then a
/// uniform offset within it).
pub fn sample_insertion_point(region: &BinaryMask, severity: Severity, level: crate::geometry::Level, rng: &mut Rng) -> Result<Landmark> {
    let count = region.count();
    if count == 0 {
        bail!(Region, "pathology-plausible region is empty");
    }
    let pick = rng::below(rng, count);
    let idx = region.values.iter().enumerate().filter(|(_, &b)| b).nth(pick).map(|(i, _)| i).unwrap();
    let g = region.grid;
    let c = g.voxel_center(g.unravel(idx));
    let sp = g.spacing();
    let mut p = c;
    for (a, v) in p.iter_mut().enumerate().take(g.ndim()) {
        *v += (rng::uniform(rng) - 0.5) * sp[a];
    }
    Ok(Landmark::new(p, level, severity))
}

fn check_compat<C: LatentCodec + ?Sized>(codec: &C, image: &Volume, sched: &NoiseSchedule, cfg: &SamplerConfig) -> Result<()> {
    cfg.validate(sched)?;
    if image.grid != codec.image_grid() || image.channels != 1 {
        bail!(Shape, "input image does not match the codec's image grid");
    }
    Ok(())
}

/// Everything one inpainting run needs besides the method.
pub struct InpaintJob<'a, P: NoisePredictor + ?Sized, C: LatentCodec + ?Sized> {
    pub image: &'a Volume,
    pub landmark: &'a Landmark,
    pub model: &'a P,
    pub codec: &'a C,
    pub sched: &'a NoiseSchedule,
}

impl<P: NoisePredictor + ?Sized, C: LatentCodec + ?Sized> InpaintJob<'_, P, C> {
    fn prepare(&self, cfg: &SamplerConfig, variant: TrainVariant) -> Result<(Volume, WeightField, Conditioning, Vec<usize>)> {
        check_compat(self.codec, self.image, self.sched, cfg)?;
        let z = self.codec.encode(self.image)?;
        let w = variant_weights(
            variant,
            self.landmark,
            &self.codec.image_grid(),
            &self.codec.latent_grid(),
            cfg.sigma_mm,
            cfg.mask_tau,
        )?;
        let ladder = inference_ladder(self.sched.num_train_steps(), cfg.num_inference_steps)?;
        Ok((z, w, Conditioning::new(self.landmark.level, self.landmark.severity), ladder))
    }

    fn weighted_like(&self, cfg: &SamplerConfig, variant: TrainVariant, observer: Option<StepObserver>) -> Result<Volume> {
        let (z, w, cond, ladder) = self.prepare(cfg, variant)?;
        let mut r = rng::seeded(cfg.seed);
        let tf = voxel_timesteps(&w, ladder[0], self.sched)?;
        let eps = r.draw(&z);
        let z_start = q_sample_weighted(&z, &tf, self.sched, &eps)?;
        let z0 = reverse_process(self.model, z_start, Some(&w), &cond, self.sched, &ladder, cfg.scheduler, &mut r, observer)?;
        self.codec.decode(&z0)
    }

    /// Proposed method: Gaussian-weighted per-voxel noise.
    pub fn weighted(&self, cfg: &SamplerConfig, observer: Option<StepObserver>) -> Result<Volume> {
        self.weighted_like(cfg, TrainVariant::Weighted, observer)
    }

    /// Baseline: noise added and removed only inside the `W > tau` mask.
    pub fn masked(&self, cfg: &SamplerConfig, observer: Option<StepObserver>) -> Result<Volume> {
        self.weighted_like(cfg, TrainVariant::Masked, observer)
    }

    /// Baseline: unconditional sampling with outside-mask latents replaced
    /// by the noised original after every step.
    pub fn repaint(&self, cfg: &SamplerConfig, observer: Option<StepObserver>) -> Result<Volume> {
        let (z, _, cond, ladder) = self.prepare(cfg, TrainVariant::Standard)?;
        let wg = variant_weights(
            TrainVariant::Weighted,
            self.landmark,
            &self.codec.image_grid(),
            &self.codec.latent_grid(),
            cfg.sigma_mm,
            cfg.mask_tau,
        )?;
        let mask = threshold_mask(&wg, cfg.mask_tau)?;
        let n = z.grid.len();
        let mut r = rng::seeded(cfg.seed);
        let eps = r.draw(&z);
        let z_start = q_sample_weighted(&z, &TimestepField::uniform(z.grid, ladder[0]), self.sched, &eps)?;
        let sched = self.sched;
        let mut post = |t_to: usize, state: &mut Volume, noise: &mut dyn NoiseSource| -> Result<Option<Volume>> {
            let nv = noise.draw(state);
            let known = q_sample_weighted(&z, &TimestepField::uniform(z.grid, t_to), sched, &nv)?;
            for (i, v) in state.data.iter_mut().enumerate() {
                if !mask.values[i % n] {
                    *v = known.data[i];
                }
            }
            Ok(Some(known))
        };
        let engine = Engine { model: self.model, sched, w: None, w_input: WeightField::constant(z.grid, 1.0), cond: &cond };
        let z0 = engine.run(z_start, &ladder, cfg.scheduler, &mut r, Some(&mut post), observer)?;
        self.codec.decode(&z0)
    }

    pub fn run(&self, cfg: &SamplerConfig, observer: Option<StepObserver>) -> Result<Volume> {
        match cfg.method {
            Method::Weighted => self.weighted(cfg, observer),
            Method::Masked => self.masked(cfg, observer),
            Method::Repaint => self.repaint(cfg, observer),
        }
    }
}

/// Latent voxels whose effective timestep is zero at every visited ladder
/// step; these are never touched by the weighted sampler.
pub fn untouched_voxels(w: &WeightField, ladder: &[usize]) -> Vec<bool> {
    w.values.iter().map(|&wv| ladder.iter().all(|&t| voxel_timestep(wv, t) == 0)).collect()
}

pub fn weighted_inpaint<P: NoisePredictor + ?Sized, C: LatentCodec>(
    image: &Volume,
    landmark: &Landmark,
    model: &P,
    codec: &C,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Volume> {
    InpaintJob { image, landmark, model, codec, sched }.weighted(cfg, None)
}

pub fn repaint_inpaint<P: NoisePredictor + ?Sized, C: LatentCodec>(
    image: &Volume,
    landmark: &Landmark,
    model: &P,
    codec: &C,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Volume> {
    InpaintJob { image, landmark, model, codec, sched }.repaint(cfg, None)
}

pub fn masked_inpaint<P: NoisePredictor + ?Sized, C: LatentCodec>(
    image: &Volume,
    landmark: &Landmark,
    model: &P,
    codec: &C,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Volume> {
    InpaintJob { image, landmark, model, codec, sched }.masked(cfg, None)
}

/// Closed-form `E[x0 | x_t]` for a scalar `N(0, prior_var)` prior.
pub fn gaussian_posterior_mean(x_t: f64, ab: f64, prior_var: f64) -> f64 {
    libm::sqrt(ab) * prior_var / (ab * prior_var + 1.0 - ab) * x_t
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::codec::IdentityCodec;
    use crate::denoiser::LinearGaussianDenoiser;
    use crate::geometry::{gaussian_weight_field, Level, VolumeGrid};
    use crate::schedule::ScheduleParams;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(ScheduleParams::default()).unwrap()
    }

    fn cond() -> Conditioning {
        Conditioning::new(Level::L4L5, Severity::Small)
    }

    #[test]
    fn ladder_shape() {
        let l = inference_ladder(1000, 50).unwrap();
        assert_eq!(l.len(), 51);
        assert_eq!((l[0], l[1], l[49], l[50]), (1000, 980, 20, 0));
        let l = inference_ladder(1000, 3).unwrap();
        assert_eq!(l, vec![1000, 667, 333, 0]);
        assert!(inference_ladder(1000, 0).is_err());
        assert!(inference_ladder(10, 11).is_err());
    }

    #[test]
    fn multistep_weights_sum_to_one() {
        assert_eq!((55.0 - 59.0 + 37.0 - 9.0) / 24.0, 1.0);
    }

    #[test]
    fn equal_effective_timesteps_pass_through() {
        let s = sched();
        let grid = VolumeGrid::new_2d([3, 1], [1.0, 1.0], [0.0, 0.0]).unwrap();
        let z = Volume::from_data(grid, 1, vec![0.7, -0.3, 1.1]).unwrap();
        let eps = Volume::from_data(grid, 1, vec![5.0, 5.0, 5.0]).unwrap();
        // 0.0005 * 500 and 0.0005 * 480 both round to 0; the others move.
        let w = WeightField { grid, values: vec![0.0005, 1.0, 0.5] };
        let out = ddpm_step_weighted(&z, &eps, 500, 480, &w, &s, &mut rng::seeded(0)).unwrap();
        assert_eq!(out.data[0].to_bits(), z.data[0].to_bits());
        assert_ne!(out.data[1], z.data[1]);
        assert_ne!(out.data[2], z.data[2]);
    }

    #[test]
    fn unit_weights_match_textbook_step() {
        let s = sched();
        let grid = VolumeGrid::new_2d([4, 1], [1.0, 1.0], [0.0, 0.0]).unwrap();
        let z = Volume::from_data(grid, 1, vec![0.7, -0.3, 1.1, 0.0]).unwrap();
        let eps = Volume::from_data(grid, 1, vec![0.1, 0.2, -0.4, 1.0]).unwrap();
        let w = WeightField::constant(grid, 1.0);
        let out = ddpm_step_weighted(&z, &eps, 600, 580, &w, &s, &mut rng::seeded(3)).unwrap();
        let noise = rng::normal_volume(&mut rng::seeded(3), grid, 1);
        let (a, b) = (s.alpha_bar(600), s.alpha_bar(580));
        for i in 0..4 {
            // Textbook form: mean from x0 and x_t, beta_tilde variance.
            let x0 = (z.data[i] - (1.0 - a).sqrt() * eps.data[i]) / a.sqrt();
            let alpha = a / b;
            let mean = b.sqrt() * (1.0 - alpha) / (1.0 - a) * x0 + alpha.sqrt() * (1.0 - b) / (1.0 - a) * z.data[i];
            let expect = mean + ((1.0 - b) / (1.0 - a) * (1.0 - alpha)).sqrt() * noise.data[i];
            assert!((out.data[i] - expect).abs() < 1e-12);
        }
        assert!(matches!(
            ddpm_step_weighted(&z, &eps, 500, 500, &w, &s, &mut ZeroNoise),
            Err(crate::Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn zero_noise_chain_recovers_posterior_mean() {
        let s = sched();
        let grid = VolumeGrid::new_2d([1, 1], [1.0, 1.0], [0.0, 0.0]).unwrap();
        for (wv, prior_var, x_start) in [(1.0, 1.0, 0.8), (0.6, 2.0, -1.3), (0.37, 0.5, 2.2)] {
            let model = LinearGaussianDenoiser::new(s.clone(), prior_var);
            let w = WeightField { grid, values: vec![wv] };
            let ladder = inference_ladder(1000, 50).unwrap();
            let z = Volume::from_data(grid, 1, vec![x_start]).unwrap();
            let out =
                reverse_process(&model, z, Some(&w), &cond(), &s, &ladder, Scheduler::DdpmAncestral, &mut ZeroNoise, None)
                    .unwrap();
            let t_start = voxel_timestep(wv, 1000);
            let expect = gaussian_posterior_mean(x_start, s.alpha_bar(t_start), prior_var);
            assert!((out.data[0] - expect).abs() < 1e-6, "w={wv}: {} vs {expect}", out.data[0]);
        }
    }

    #[test]
    fn pndm_matches_fine_grid_reference() {
        let s = sched();
        let grid = VolumeGrid::new_2d([16, 16], [1.0, 1.0], [0.0, 0.0]).unwrap();
        let model = LinearGaussianDenoiser::new(s.clone(), 1.0);
        let w = WeightField::constant(grid, 1.0);
        let z_start = rng::normal_volume(&mut rng::seeded(11), grid, 1);
        let fast = pndm_sample(z_start.clone(), &model, &w, &cond(), &s, 50).unwrap();
        let ladder = inference_ladder(1000, 1000).unwrap();
        let fine =
            reverse_process(&model, z_start, Some(&w), &cond(), &s, &ladder, Scheduler::Ddim, &mut ZeroNoise, None).unwrap();
        let mad = fast.data.iter().zip(&fine.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / fast.len() as f64;
        assert!(mad <= 0.05, "{mad}");
        assert!(pndm_sample(fast, &model, &w, &cond(), &s, 3).is_err());
    }

    fn phantom(grid: VolumeGrid) -> Volume {
        let data = (0..grid.len()).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        Volume::from_data(grid, 1, data).unwrap()
    }

    #[test]
    fn preservation_with_identity_codec() {
        let s = sched();
        let grid = VolumeGrid::new_2d([64, 64], [1.25, 1.25], [0.0, 0.0]).unwrap();
        let codec = IdentityCodec::new(grid);
        let model = LinearGaussianDenoiser::new(s.clone(), 1.0);
        let image = phantom(grid);
        let lm = Landmark::new([20.0, 20.0, 0.0], Level::L3L4, Severity::Moderate);
        let job = InpaintJob { image: &image, landmark: &lm, model: &model, codec: &codec, sched: &s };
        for scheduler in [Scheduler::DdpmAncestral, Scheduler::Pndm] {
            let cfg = SamplerConfig { scheduler, num_inference_steps: 20, seed: 4, ..Default::default() };
            let w = gaussian_weight_field(&grid, &lm, cfg.sigma_mm).unwrap();
            let ladder = inference_ladder(1000, 20).unwrap();
            let keep = untouched_voxels(&w, &ladder);
            let mut steps = 0;
            let mut obs = |e: &StepEvent| {
                steps += 1;
                for i in 0..keep.len() {
                    if keep[i] {
                        assert_eq!(e.z.data[i].to_bits(), image.data[i].to_bits());
                    }
                }
            };
            let out = job.weighted(&cfg, Some(&mut obs)).unwrap();
            assert_eq!(steps, 20);
            assert!(keep.iter().any(|&k| k) && keep.iter().any(|&k| !k));
            assert_ne!(out, image);

            let mask = threshold_mask(&w, cfg.mask_tau).unwrap();
            let out = job.masked(&cfg, None).unwrap();
            for i in 0..grid.len() {
                if !mask.values[i] {
                    assert_eq!(out.data[i].to_bits(), image.data[i].to_bits());
                }
            }
            let mut checked = 0;
            let mut obs = |e: &StepEvent| {
                let known = e.known.unwrap();
                for i in 0..grid.len() {
                    if !mask.values[i] {
                        assert_eq!(e.z.data[i].to_bits(), known.data[i].to_bits());
                    }
                }
                checked += 1;
            };
            let out = job.repaint(&cfg, Some(&mut obs)).unwrap();
            assert_eq!(checked, 20);
            for i in 0..grid.len() {
                if !mask.values[i] {
                    assert_eq!(out.data[i].to_bits(), image.data[i].to_bits());
                }
            }
        }
    }

    #[test]
    fn repaint_known_region_is_freshly_noised_original() {
        let s = sched();
        let grid = VolumeGrid::new_2d([32, 32], [1.25, 1.25], [0.0, 0.0]).unwrap();
        let codec = IdentityCodec::new(grid);
        let model = LinearGaussianDenoiser::new(s.clone(), 1.0);
        let image = phantom(grid);
        let lm = Landmark::new([20.0, 20.0, 0.0], Level::L3L4, Severity::Moderate);
        let job = InpaintJob { image: &image, landmark: &lm, model: &model, codec: &codec, sched: &s };
        let cfg = SamplerConfig { method: Method::Repaint, num_inference_steps: 10, seed: 9, ..Default::default() };
        let mut prev: Option<Volume> = None;
        let mut obs = |e: &StepEvent| {
            let known = e.known.unwrap();
            let ab = s.alpha_bar(e.t_to);
            // known = sqrt(ab) x0 + sqrt(1-ab) n for some standard normal n.
            let n: Vec<f64> = if e.t_to == 0 {
                vec![0.0; known.len()]
            } else {
                known.data.iter().zip(&image.data).map(|(k, x)| (k - ab.sqrt() * x) / (1.0 - ab).sqrt()).collect()
            };
            if e.t_to > 0 {
                let var = n.iter().map(|v| v * v).sum::<f64>() / n.len() as f64;
                assert!((var - 1.0).abs() < 0.2, "{var}");
            }
            if let Some(p) = &prev {
                assert_ne!(p, known);
            }
            prev = Some(known.clone());
        };
        job.run(&cfg, Some(&mut obs)).unwrap();
    }

    #[test]
    fn degenerate_masks() {
        let s = sched();
        let grid = VolumeGrid::new_2d([16, 16], [1.25, 1.25], [0.0, 0.0]).unwrap();
        let codec = IdentityCodec::new(grid);
        let model = LinearGaussianDenoiser::new(s.clone(), 1.0);
        let image = phantom(grid);
        let z = image.clone();
        let cfg = SamplerConfig { num_inference_steps: 10, ..Default::default() };
        let ladder = inference_ladder(1000, 10).unwrap();
        // All-zero weights: nothing moves.
        let w0 = WeightField::constant(grid, 0.0);
        let out = reverse_process(&model, z.clone(), Some(&w0), &cond(), &s, &ladder, Scheduler::Pndm, &mut rng::seeded(1), None)
            .unwrap();
        assert_eq!(out, image);
        // Single-voxel mask: only that voxel may change.
        let mut w1 = WeightField::constant(grid, 0.0);
        w1.values[37] = 1.0;
        let out = reverse_process(&model, z, Some(&w1), &cond(), &s, &ladder, Scheduler::DdpmAncestral, &mut rng::seeded(1), None)
            .unwrap();
        for i in 0..grid.len() {
            if i != 37 {
                assert_eq!(out.data[i], image.data[i]);
            }
        }
        assert_ne!(out.data[37], image.data[37]);
        // Landmark far outside any reachable voxel is still rejected cleanly.
        let lm = Landmark::new([500.0, 0.0, 0.0], Level::L1L2, Severity::Small);
        let job = InpaintJob { image: &image, landmark: &lm, model: &model, codec: &codec, sched: &s };
        assert!(matches!(job.weighted(&cfg, None), Err(crate::Error::InvalidLandmark(_))));
    }

    #[test]
    fn unit_weights_equal_standard_sampler() {
        let s = sched();
        let grid = VolumeGrid::new_2d([8, 8], [1.0, 1.0], [0.0, 0.0]).unwrap();
        let model = LinearGaussianDenoiser::new(s.clone(), 1.0);
        let z = rng::normal_volume(&mut rng::seeded(2), grid, 2);
        let w = WeightField::constant(grid, 1.0);
        let ladder = inference_ladder(1000, 25).unwrap();
        for sch in [Scheduler::DdpmAncestral, Scheduler::Pndm, Scheduler::Ddim] {
            let a = reverse_process(&model, z.clone(), Some(&w), &cond(), &s, &ladder, sch, &mut rng::seeded(8), None).unwrap();
            let b = reverse_process(&model, z.clone(), None, &cond(), &s, &ladder, sch, &mut rng::seeded(8), None).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn effective_timesteps_never_increase() {
        let s = sched();
        let grid = VolumeGrid::new_2d([24, 24], [1.25, 1.25], [0.0, 0.0]).unwrap();
        let lm = Landmark::new([14.0, 9.0, 0.0], Level::L2L3, Severity::Small);
        let w = gaussian_weight_field(&grid, &lm, 16.0).unwrap();
        let ladder = inference_ladder(1000, 50).unwrap();
        for i in 0..grid.len() {
            let seq: Vec<usize> = ladder.iter().map(|&t| voxel_timestep(w.values[i], t)).collect();
            assert!(seq.windows(2).all(|p| p[1] <= p[0]));
        }
        let _ = s;
    }

    #[test]
    fn insertion_points_are_inside_and_distinct() {
        let grid = VolumeGrid::new_2d([64, 64], [1.25, 1.25], [0.0, 0.0]).unwrap();
        let mut region = BinaryMask { grid, values: vec![false; grid.len()] };
        for y in 30..36 {
            for x in 10..50 {
                region.values[grid.index([x, y, 0])] = true;
            }
        }
        let mut pts = Vec::new();
        for seed in 0..100 {
            let lm = sample_insertion_point(&region, Severity::Small, Level::L5S1, &mut rng::seeded(seed)).unwrap();
            assert!(region.values[grid.index(grid.nearest_voxel(lm.position_mm))]);
            pts.push(lm.position_mm);
        }
        let mut uniq = pts.clone();
        uniq.sort_by(|a, b| a.partial_cmp(b).unwrap());
        uniq.dedup();
        assert!(uniq.len() >= 95);
        let a = sample_insertion_point(&region, Severity::Small, Level::L5S1, &mut rng::seeded(3)).unwrap();
        assert_eq!(a, sample_insertion_point(&region, Severity::Small, Level::L5S1, &mut rng::seeded(3)).unwrap());
        let empty = BinaryMask { grid, values: vec![false; grid.len()] };
        assert!(matches!(
            sample_insertion_point(&empty, Severity::Small, Level::L5S1, &mut rng::seeded(0)),
            Err(crate::Error::Region(_))
        ));
    }
}
