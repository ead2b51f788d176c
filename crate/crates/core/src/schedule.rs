//! Noise schedules and the spatially weighted forward (noising) process.
//!
//! Index convention: `t = 0` is clean data and every table has `T + 1`
//! entries with `alpha_bar[0] = 1`. A voxel whose rounded timestep is zero is
//! never touched.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::geometry::{VolumeGrid, WeightField};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    ScaledLinear,
}

/// Serializable schedule parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleParams {
    pub kind: ScheduleKind,
    pub num_train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { kind: ScheduleKind::Linear, num_train_steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(params: ScheduleParams) -> Result<Self> {
        build_schedule(params.kind, params.num_train_steps, params.beta_start, params.beta_end)
    }

    /// Schedule from explicit betas for `t = 1..=T`.
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() {
            bail!(InvalidParameter, "schedule needs at least one step");
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            bail!(InvalidParameter, "every beta must lie in (0, 1)");
        }
        let t = betas.len();
        let mut all_betas = Vec::with_capacity(t + 1);
        all_betas.push(0.0);
        all_betas.extend_from_slice(betas);
        let alphas: Vec<f64> = all_betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(t + 1);
        let mut acc = 1.0;
        alpha_bar.push(1.0);
        for a in &alphas[1..] {
            acc *= a;
            alpha_bar.push(acc);
        }
        let params = ScheduleParams {
            kind: ScheduleKind::Linear,
            num_train_steps: t,
            beta_start: betas[0],
            beta_end: betas[t - 1],
        };
        Ok(Self { params, betas: all_betas, alphas, alpha_bar })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }
    pub fn num_train_steps(&self) -> usize {
        self.params.num_train_steps
    }
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

pub fn build_schedule(kind: ScheduleKind, num_train_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if num_train_steps == 0 {
        bail!(InvalidParameter, "T must be at least 1");
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        bail!(
            InvalidParameter,
            "need 0 < beta_start <= beta_end < 1, got ({}, {})",
            beta_start,
            beta_end
        );
    }
    let n = num_train_steps;
    let lerp = |a: f64, b: f64, i: usize| {
        if n == 1 {
            a
        } else {
            a + (b - a) * i as f64 / (n - 1) as f64
        }
    };
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..n).map(|i| lerp(beta_start, beta_end, i)).collect(),
        ScheduleKind::ScaledLinear => {
            let (a, b) = (libm::sqrt(beta_start), libm::sqrt(beta_end));
            (0..n).map(|i| {
                let s = lerp(a, b, i);
                s * s
            })
            .collect()
        }
    };
    let mut s = NoiseSchedule::from_betas(&betas)?;
    s.params = ScheduleParams { kind, num_train_steps, beta_start, beta_end };
    Ok(s)
}

/// Per-voxel integer timesteps derived from a weight field.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepField {
    pub grid: VolumeGrid,
    pub t_v: Vec<usize>,
    pub global_t: usize,
}

impl TimestepField {
    pub fn uniform(grid: VolumeGrid, t: usize) -> Self {
        Self { grid, t_v: alloc::vec![t; grid.len()], global_t: t }
    }
}

/// `round(w * t)`, rounding halves up.
#[inline]
pub fn voxel_timestep(w: f64, t: usize) -> usize {
    let r = libm::floor(w * t as f64 + 0.5);
    if r <= 0.0 {
        0
    } else {
        (r as usize).min(t)
    }
}

pub fn voxel_timesteps(w: &WeightField, t: usize, sched: &NoiseSchedule) -> Result<TimestepField> {
    if t > sched.num_train_steps() {
        bail!(InvalidParameter, "timestep {} exceeds T = {}", t, sched.num_train_steps());
    }
    Ok(TimestepField { grid: w.grid, t_v: w.values.iter().map(|&v| voxel_timestep(v, t)).collect(), global_t: t })
}

/// Weighted forward process: per voxel,
/// `x_t = sqrt(abar[t_v]) * x0 + sqrt(1 - abar[t_v]) * eps`, with voxels at
/// `t_v = 0` copied unchanged. The timestep field applies to all channels.
pub fn q_sample_weighted(x0: &Volume, tf: &TimestepField, sched: &NoiseSchedule, noise: &Volume) -> Result<Volume> {
    if tf.grid != x0.grid || !noise.same_layout(x0) {
        bail!(Shape, "x0, timestep field and noise must share the latent grid");
    }
    if tf.t_v.iter().any(|&t| t > sched.num_train_steps()) {
        bail!(InvalidParameter, "timestep field exceeds schedule length");
    }
    let n = x0.grid.len();
    let mut out = x0.clone();
    for c in 0..x0.channels {
        for (i, &t) in tf.t_v.iter().enumerate() {
            if t == 0 {
                continue;
            }
            let k = c * n + i;
            let ab = sched.alpha_bar(t);
            out.data[k] = libm::sqrt(ab) * x0.data[k] + libm::sqrt(1.0 - ab) * noise.data[k];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn grid(n: usize) -> VolumeGrid {
        VolumeGrid::new_2d([n, 1], [1.0, 1.0], [0.0, 0.0]).unwrap()
    }

    #[test]
    fn default_schedule_invariants() {
        let s = NoiseSchedule::new(ScheduleParams::default()).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(s.alpha_bars().len(), 1001);
        for t in 0..1000 {
            assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
        }
        let last = s.alpha_bar(1000);
        assert!(last > 0.0 && last < 1.0);
        let sl = build_schedule(ScheduleKind::ScaledLinear, 1000, 0.00085, 0.012).unwrap();
        assert!((sl.beta(1) - 0.00085).abs() < 1e-15 && (sl.beta(1000) - 0.012).abs() < 1e-15);
    }

    #[test]
    fn two_step_hand_multiplication() {
        let s = build_schedule(ScheduleKind::Linear, 2, 0.1, 0.2).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn invalid_bounds() {
        assert!(build_schedule(ScheduleKind::Linear, 0, 1e-4, 0.02).is_err());
        assert!(build_schedule(ScheduleKind::Linear, 10, 0.0, 0.02).is_err());
        assert!(build_schedule(ScheduleKind::Linear, 10, 0.03, 0.02).is_err());
        assert!(build_schedule(ScheduleKind::Linear, 10, 0.01, 1.0).is_err());
    }

    #[test]
    fn rounding_cases() {
        assert_eq!(voxel_timestep(1.0, 1000), 1000);
        assert_eq!(voxel_timestep(0.13534, 1000), 135);
        assert_eq!(voxel_timestep(0.04, 10), 0);
        assert_eq!(voxel_timestep(0.05, 10), 1);
        let s = NoiseSchedule::new(ScheduleParams::default()).unwrap();
        let w = WeightField::constant(grid(3), 0.5);
        assert!(voxel_timesteps(&w, 1001, &s).is_err());
    }

    #[test]
    fn zero_timesteps_copy_bit_exact() {
        let s = NoiseSchedule::new(ScheduleParams::default()).unwrap();
        let g = grid(5);
        let x0 = Volume::from_data(g, 2, (0..10).map(|i| i as f64 * -0.3).collect()).unwrap();
        let noise = rng::normal_volume(&mut rng::seeded(1), g, 2);
        let tf = TimestepField::uniform(g, 0);
        assert_eq!(q_sample_weighted(&x0, &tf, &s, &noise).unwrap(), x0);
    }

    #[test]
    fn saturated_voxel_is_pure_noise() {
        let s = build_schedule(ScheduleKind::Linear, 1000, 0.02, 0.5).unwrap();
        assert!(s.alpha_bar(1000) < 1e-100);
        let g = grid(1);
        let x0 = Volume::from_data(g, 1, alloc::vec![3.0]).unwrap();
        let noise = Volume::from_data(g, 1, alloc::vec![0.7]).unwrap();
        let out = q_sample_weighted(&x0, &TimestepField::uniform(g, 1000), &s, &noise).unwrap();
        assert!((out.data[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let s = NoiseSchedule::new(ScheduleParams::default()).unwrap();
        let x0 = Volume::zeros(grid(4), 1);
        let noise = Volume::zeros(grid(5), 1);
        assert!(matches!(
            q_sample_weighted(&x0, &TimestepField::uniform(grid(4), 3), &s, &noise),
            Err(crate::Error::Shape(_))
        ));
    }

    #[test]
    fn monte_carlo_moments() {
        let s = NoiseSchedule::new(ScheduleParams::default()).unwrap();
        let g = grid(1);
        let x0 = Volume::from_data(g, 1, alloc::vec![0.8]).unwrap();
        let tf = TimestepField::uniform(g, 300);
        let ab = s.alpha_bar(300);
        let mut r = rng::seeded(42);
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let e = rng::normal_volume(&mut r, g, 1);
                q_sample_weighted(&x0, &tf, &s, &e).unwrap().data[0]
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - ab.sqrt() * 0.8).abs() < 4.0 * ((1.0 - ab) / n as f64).sqrt());
        assert!((var / (1.0 - ab) - 1.0).abs() < 0.05);
    }

    #[test]
    fn corruption_grows_with_timestep() {
        let s = NoiseSchedule::new(ScheduleParams::default()).unwrap();
        let g = grid(1);
        let x0 = Volume::from_data(g, 1, alloc::vec![1.0]).unwrap();
        let mut r = rng::seeded(3);
        let noises: Vec<Volume> = (0..2000).map(|_| rng::normal_volume(&mut r, g, 1)).collect();
        let mut prev = -1.0;
        for t in [0usize, 10, 50, 200, 600, 1000] {
            let tf = TimestepField::uniform(g, t);
            let mse: f64 = noises
                .iter()
                .map(|e| (q_sample_weighted(&x0, &tf, &s, e).unwrap().data[0] - 1.0).powi(2))
                .sum::<f64>()
                / 2000.0;
            assert!(mse >= prev);
            prev = mse;
        }
    }
}
