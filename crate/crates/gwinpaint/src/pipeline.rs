//! In-memory building blocks shared by the CLI commands: example encoding,
//! classifier patch sets, inpainting plans and real reference patches.

use gwinpaint_core::codec::{Codec, LatentCodec};
use gwinpaint_core::denoiser::UNetDenoiser;
use gwinpaint_core::eval::{classifier_site, crop_landmark_patch, LabeledPatch, Patch};
use gwinpaint_core::rng;
use gwinpaint_core::sampling::{sample_insertion_point, InpaintJob, SamplerConfig};
use gwinpaint_core::schedule::NoiseSchedule;
use gwinpaint_core::synthdata::{Dataset, Split};
use gwinpaint_core::training::{TrainExample, TrainVariant};
use gwinpaint_core::{Landmark, Level, Result, Severity, Volume};
use serde::{Deserialize, Serialize};

/// Encoded examples for every labelled sample of `split`.
pub fn train_examples(
    dataset: &Dataset,
    split: Split,
    codec: &Codec,
    variant: TrainVariant,
    sigma_mm: f64,
    mask_tau: f64,
) -> Result<Vec<TrainExample>> {
    let p = dataset.mix.pathology;
    dataset
        .split(split)
        .filter(|s| s.label(p).is_some())
        .map(|s| TrainExample::new(codec.encode(&s.image)?, s.landmark.as_ref(), &s.image.grid, variant, sigma_mm, mask_tau))
        .collect()
}

/// Real and codec-reconstructed landmark patches of a split, for the classifier.
pub fn classifier_set(dataset: &Dataset, split: Split, codec: Option<&Codec>, patch_mm: [f64; 3], seed: u64) -> Result<Vec<LabeledPatch>> {
    let p = dataset.mix.pathology;
    let mut out = Vec::new();
    for s in dataset.split(split) {
        let mut r = rng::stream(seed, s.id as u64);
        let (lm, class) = classifier_site(s, p, &mut r)?;
        out.push(LabeledPatch { patch: crop_landmark_patch(&s.image, lm.position_mm, patch_mm)?, class });
        if let Some(c) = codec {
            let rec = c.decode(&c.encode(&s.image)?)?;
            out.push(LabeledPatch { patch: crop_landmark_patch(&rec, lm.position_mm, patch_mm)?, class });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InpaintInput {
    pub sample_id: usize,
    pub landmark: Landmark,
}

/// The normal test inputs of one `(level, severity)` cell with their
/// sampled insertion points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellPlan {
    pub level: Level,
    pub severity: Severity,
    pub inputs: Vec<InpaintInput>,
}

/// One plan per cell. Normal test samples of the level are cycled until
/// `inputs_per_cell` inputs exist; each input gets its own insertion point.
pub fn plan_cells(dataset: &Dataset, inputs_per_cell: usize, seed: u64) -> Result<Vec<CellPlan>> {
    let p = dataset.mix.pathology;
    let mut plans = Vec::new();
    for (si, sev) in p.severities().into_iter().enumerate() {
        for level in Level::ALL {
            let normals: Vec<_> = dataset.split(Split::Test).filter(|s| s.is_normal() && s.level == level).collect();
            let mut inputs = Vec::new();
            if !normals.is_empty() {
                for k in 0..inputs_per_cell {
                    let s = normals[k % normals.len()];
                    let mut r = rng::stream(seed, ((si * 5 + level.index()) * 100_000 + k) as u64);
                    let landmark = sample_insertion_point(s.region_masks.get(p), sev, level, &mut r)?;
                    inputs.push(InpaintInput { sample_id: s.id, landmark });
                }
            }
            plans.push(CellPlan { level, severity: sev, inputs });
        }
    }
    Ok(plans)
}

/// Seed of generation `g` for input `k` of cell `cell`; shared by all methods.
pub fn generation_seed(base: u64, cell: usize, k: usize, g: usize) -> u64 {
    rng::derive_seed(base, ((cell as u64) << 40) ^ ((k as u64) << 8) ^ g as u64)
}

pub fn sample_by_id(dataset: &Dataset, id: usize) -> Result<&gwinpaint_core::synthdata::Sample> {
    dataset
        .samples
        .get(id)
        .filter(|s| s.id == id)
        .or_else(|| dataset.samples.iter().find(|s| s.id == id))
        .ok_or_else(|| gwinpaint_core::Error::Data(format!("no sample with id {id}")))
}

/// Inpaint every input of a cell `generations` times.
#[allow(clippy::too_many_arguments)]
pub fn inpaint_cell(
    dataset: &Dataset,
    plan: &CellPlan,
    cell_index: usize,
    model: &UNetDenoiser,
    codec: &Codec,
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    generations: usize,
) -> Result<Vec<Vec<Volume>>> {
    let mut out = Vec::with_capacity(plan.inputs.len());
    for (k, input) in plan.inputs.iter().enumerate() {
        let s = sample_by_id(dataset, input.sample_id)?;
        let job = InpaintJob { image: &s.image, landmark: &input.landmark, model, codec, sched };
        let mut group = Vec::with_capacity(generations);
        for g in 0..generations {
            let cfg = SamplerConfig { seed: generation_seed(sampler.seed, cell_index, k, g), ..*sampler };
            group.push(job.run(&cfg, None)?);
        }
        out.push(group);
    }
    Ok(out)
}

/// Real test patches showing `severity` at `level`, cropped at their landmark.
pub fn real_patches(dataset: &Dataset, level: Level, severity: Severity, patch_mm: [f64; 3]) -> Result<Vec<Patch>> {
    let p = severity.pathology();
    dataset
        .split(Split::Test)
        .filter(|s| s.level == level && s.label(p) == Some(severity))
        .map(|s| crop_landmark_patch(&s.image, s.landmark.expect("labelled samples carry landmarks").position_mm, patch_mm))
        .collect()
}

pub fn output_patches(plan: &CellPlan, outputs: &[Vec<Volume>], patch_mm: [f64; 3]) -> Result<Vec<Vec<Patch>>> {
    plan.inputs
        .iter()
        .zip(outputs)
        .map(|(inp, group)| group.iter().map(|v| crop_landmark_patch(v, inp.landmark.position_mm, patch_mm)).collect())
        .collect()
}
