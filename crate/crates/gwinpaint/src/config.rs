//! Run configuration: a TOML file with one section per stage. Unknown keys
//! are rejected; omitted keys take their defaults. The effective config is
//! written next to every artifact as `config.toml`.

use std::path::Path;

use gwinpaint_core::codec::CodecTrainConfig;
use gwinpaint_core::denoiser::DenoiserConfig;
use gwinpaint_core::eval::{ClassifierConfig, DEFAULT_PATCH_MM};
use gwinpaint_core::sampling::SamplerConfig;
use gwinpaint_core::schedule::ScheduleParams;
use gwinpaint_core::synthdata::PhantomSpec;
use gwinpaint_core::training::TrainConfig;
use gwinpaint_core::Pathology;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub samples: usize,
    pub seed: u64,
    pub normal_share: f64,
    pub severity_shares: [f64; 2],
    pub phantom: PhantomSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { samples: 2000, seed: 1, normal_share: 0.4, severity_shares: [0.3, 0.3], phantom: PhantomSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub inputs_per_cell: usize,
    pub generations: usize,
    pub patch_mm: [f64; 3],
    /// Seed for insertion points of the inpainting plan.
    pub plan_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { inputs_per_cell: 25, generations: 4, patch_mm: DEFAULT_PATCH_MM, plan_seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub pathology: Pathology,
    pub data: DataConfig,
    pub codec: CodecTrainConfig,
    pub classifier: ClassifierConfig,
    pub schedule: ScheduleParams,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pathology: Pathology::Dh,
            data: DataConfig::default(),
            codec: CodecTrainConfig::default(),
            classifier: ClassifierConfig::default(),
            schedule: ScheduleParams::default(),
            denoiser: DenoiserConfig::default(),
            train: TrainConfig { lr: 1e-3, max_steps: 10000, ..TrainConfig::default() },
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = String::from_utf8(formats::read(path)?).map_err(|_| Error::format(path, "config is not UTF-8"))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.phantom.validate()?;
        self.classifier.validate()?;
        self.denoiser.validate()?;
        self.train.validate()?;
        gwinpaint_core::schedule::NoiseSchedule::new(self.schedule)?;
        if self.eval.generations == 0 || self.eval.inputs_per_cell == 0 {
            return Err(Error::Config("eval.generations and eval.inputs_per_cell must be at least 1".into()));
        }
        Ok(())
    }

    /// Content hash of the effective config.
    pub fn fingerprint(&self) -> String {
        formats::sha256_hex(self.to_toml().as_bytes())
    }
}
