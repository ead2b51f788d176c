//! One function per CLI subcommand. Each reads only its inputs, writes only
//! under `out`, and records provenance (config hash, seeds and upstream
//! fingerprints) in `provenance.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gwinpaint_core::codec::{self, Codec, CodecKind, ConvAeCodec, ConvAeConfig, IdentityCodec, LatentCodec};
use gwinpaint_core::denoiser::{DenoiserConfig, UNetDenoiser};
use gwinpaint_core::eval::{
    evaluate_cell, render_csv, render_table, split_half_fd, train_classifier, CellOutputs, ClassifierConfig, MethodReport, Patch,
    PatchClassifier,
};
use gwinpaint_core::rng;
use gwinpaint_core::sampling::{InpaintJob, Method, SamplerConfig};
use gwinpaint_core::schedule::{NoiseSchedule, ScheduleParams};
use gwinpaint_core::synthdata::{make_dataset, Dataset, PathologyMix, Split};
use gwinpaint_core::training::{train, TrainVariant};
use gwinpaint_core::{Landmark, Level, Pathology, Severity, Volume};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset_io::{dataset_fingerprint, read_dataset, write_dataset};
use crate::error::{Error, Result};
use crate::formats::{self, GridMeta};
use crate::pipeline::{self, CellPlan};

pub const CODEC_FILE: &str = "codec.ckpt";
pub const CLASSIFIER_FILE: &str = "classifier.ckpt";
pub const MODEL_FILE: &str = "model.ckpt";
pub const EVAL_FILE: &str = "eval.json";
pub const OUTPUTS_FILE: &str = "outputs.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    /// Upstream artifact name -> fingerprint.
    pub upstream: BTreeMap<String, String>,
}

fn provenance(command: &str, cfg: &RunConfig, seed: u64, upstream: &[(&str, &str)]) -> Provenance {
    Provenance {
        command: command.into(),
        config_sha256: cfg.fingerprint(),
        seed,
        upstream: upstream.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
    }
}

fn write_run_files(out: &Path, cfg: &RunConfig, prov: &Provenance) -> Result<()> {
    formats::write_atomic(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    formats::write_json(&out.join("provenance.json"), prov)
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::format(path, e.to_string()))?;
    for r in rows {
        w.write_record(&r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    formats::write_atomic(path, &w.into_inner().map_err(|e| Error::format(path, e.to_string()))?)
}

fn ensure_pathology(d: &Dataset, p: Pathology) -> Result<()> {
    if d.mix.pathology != p {
        return Err(Error::Core(gwinpaint_core::Error::Data(format!(
            "dataset was generated for {} but {} was requested",
            d.mix.pathology, p
        ))));
    }
    Ok(())
}

/// `gen-data`: synthesize a dataset directory.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    let mix = PathologyMix { pathology: cfg.pathology, normal: cfg.data.normal_share, severities: cfg.data.severity_shares };
    let d = make_dataset(cfg.data.samples, mix, &cfg.data.phantom, cfg.data.seed)?;
    write_dataset(out, &d)?;
    write_run_files(out, cfg, &provenance("gen-data", cfg, cfg.data.seed, &[]))?;
    Ok(d)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecMeta {
    pub codec_kind: CodecKind,
    pub image_grid: GridMeta,
    pub model: ConvAeConfig,
    pub latent_shift: Vec<f64>,
    pub latent_scale: Vec<f64>,
    pub best_val_mse: f64,
    pub provenance: Provenance,
}

/// `train-codec`: fit a latent codec on the training split.
pub fn train_codec_cmd(data: &Path, kind: Option<CodecKind>, cfg: &RunConfig, out: &Path) -> Result<String> {
    let d = read_dataset(data)?;
    let mut ccfg = cfg.codec;
    if let Some(k) = kind {
        ccfg.kind = k;
    }
    let imgs = |s: Split| d.split(s).map(|x| x.image.clone()).collect::<Vec<_>>();
    let run = codec::train_codec(&imgs(Split::Train), &imgs(Split::Val), &ccfg)?;
    let prov = provenance("train-codec", cfg, ccfg.seed, &[("dataset", &dataset_fingerprint(data)?)]);
    let (names, tensors, shift, scale) = match &run.codec {
        Codec::ConvAe(c) => (c.params().names().to_vec(), c.params().tensors().to_vec(), c.latent_shift().to_vec(), c.latent_scale().to_vec()),
        Codec::Identity(_) => (Vec::new(), Vec::new(), Vec::new(), Vec::new()),
    };
    let meta = CodecMeta {
        codec_kind: ccfg.kind,
        image_grid: GridMeta::of(&run.codec.image_grid()),
        model: ccfg.model,
        latent_shift: shift,
        latent_scale: scale,
        best_val_mse: run.best_val_loss,
        provenance: prov.clone(),
    };
    let fp = formats::write_checkpoint(&out.join(CODEC_FILE), "codec", &meta, &names, &tensors)?;
    write_csv(
        &out.join("log.csv"),
        &["step", "train_loss", "val_loss"],
        run.log.iter().map(|e| vec![e.step.to_string(), e.train_loss.to_string(), e.val_loss.to_string()]),
    )?;
    write_run_files(out, &RunConfig { codec: ccfg, ..cfg.clone() }, &prov)?;
    Ok(fp)
}

/// Load a codec checkpoint; returns the codec and its fingerprint.
pub fn load_codec(path: &Path) -> Result<(Codec, String)> {
    let ck = formats::read_checkpoint(path, "codec")?;
    let meta: CodecMeta = ck.meta_as(path)?;
    let grid = meta.image_grid.grid()?;
    let c = match meta.codec_kind {
        CodecKind::Identity => Codec::Identity(IdentityCodec::new(grid)),
        CodecKind::ConvAe => Codec::ConvAe(ConvAeCodec::from_parts(grid, meta.model, ck.tensors, meta.latent_shift, meta.latent_scale)?),
    };
    Ok((c, ck.fingerprint))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierMeta {
    pub pathology: Pathology,
    pub config: ClassifierConfig,
    pub patch_mm: [f64; 3],
    pub val_accuracy: f64,
    pub per_class_accuracy: [Option<f64>; 3],
    pub provenance: Provenance,
}

/// `train-classifier`: realism/pathology classifier on landmark patches.
/// With a codec, reconstructions of the training images are added so the
/// classifier does not treat codec smoothing as a defect.
pub fn train_classifier_cmd(data: &Path, pathology: Pathology, codec: Option<&Path>, cfg: &RunConfig, out: &Path) -> Result<String> {
    let d = read_dataset(data)?;
    ensure_pathology(&d, pathology)?;
    let loaded = codec.map(load_codec).transpose()?;
    let seed = cfg.classifier.seed;
    let tr = pipeline::classifier_set(&d, Split::Train, loaded.as_ref().map(|c| &c.0), cfg.eval.patch_mm, rng::derive_seed(seed, 1))?;
    let va = pipeline::classifier_set(&d, Split::Val, None, cfg.eval.patch_mm, rng::derive_seed(seed, 2))?;
    let run = train_classifier(&tr, &va, pathology, &cfg.classifier)?;
    let dfp = dataset_fingerprint(data)?;
    let mut up = vec![("dataset", dfp.as_str())];
    if let Some((_, fp)) = &loaded {
        up.push(("codec", fp));
    }
    let prov = provenance("train-classifier", cfg, seed, &up);
    let meta = ClassifierMeta {
        pathology,
        config: cfg.classifier,
        patch_mm: cfg.eval.patch_mm,
        val_accuracy: run.val_accuracy,
        per_class_accuracy: run.per_class_accuracy,
        provenance: prov.clone(),
    };
    let p = run.classifier.params();
    let fp = formats::write_checkpoint(&out.join(CLASSIFIER_FILE), "classifier", &meta, p.names(), p.tensors())?;
    write_csv(
        &out.join("log.csv"),
        &["step", "train_loss", "val_accuracy"],
        run.log.iter().map(|e| vec![e.step.to_string(), e.train_loss.to_string(), e.val_accuracy.to_string()]),
    )?;
    write_run_files(out, cfg, &prov)?;
    Ok(fp)
}

pub fn load_classifier(path: &Path) -> Result<(PatchClassifier, ClassifierMeta, String)> {
    let ck = formats::read_checkpoint(path, "classifier")?;
    let meta: ClassifierMeta = ck.meta_as(path)?;
    let c = PatchClassifier::from_parts(meta.config, meta.pathology, ck.tensors)?;
    Ok((c, meta, ck.fingerprint))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub variant: TrainVariant,
    pub pathology: Pathology,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleParams,
    pub sigma_mm: f64,
    pub mask_tau: f64,
    pub codec_sha256: String,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub best_step: usize,
    pub steps_run: usize,
    pub provenance: Provenance,
}

/// `train`: fit one diffusion variant in the codec's latent space.
pub fn train_cmd(data: &Path, pathology: Pathology, codec_path: &Path, variant: TrainVariant, cfg: &RunConfig, out: &Path) -> Result<String> {
    let d = read_dataset(data)?;
    ensure_pathology(&d, pathology)?;
    let (codec, cfp) = load_codec(codec_path)?;
    let sched = NoiseSchedule::new(cfg.schedule)?;
    let (sigma, tau) = (cfg.sampler.sigma_mm, cfg.sampler.mask_tau);
    let tr = pipeline::train_examples(&d, Split::Train, &codec, variant, sigma, tau)?;
    let va = pipeline::train_examples(&d, Split::Val, &codec, variant, sigma, tau)?;
    let mut dcfg = cfg.denoiser;
    dcfg.latent_channels = codec.channels();
    dcfg.slices = codec.latent_grid().nz();
    dcfg.max_timestep = sched.num_train_steps();
    let model = UNetDenoiser::new(dcfg, cfg.train.seed)?;
    let o = train(model, &tr, &va, &sched, &cfg.train, None)?;
    let prov = provenance("train", cfg, cfg.train.seed, &[("dataset", &dataset_fingerprint(data)?), ("codec", &cfp)]);
    let meta = ModelMeta {
        variant,
        pathology,
        denoiser: dcfg,
        schedule: cfg.schedule,
        sigma_mm: sigma,
        mask_tau: tau,
        codec_sha256: cfp,
        initial_val_loss: o.initial_val_loss,
        best_val_loss: o.best_val_loss,
        best_step: o.best_step,
        steps_run: o.steps_run,
        provenance: prov.clone(),
    };
    let p = o.model.params();
    let fp = formats::write_checkpoint(&out.join(MODEL_FILE), "denoiser", &meta, p.names(), p.tensors())?;
    write_csv(
        &out.join("log.csv"),
        &["step", "split", "loss"],
        o.log.iter().map(|e| vec![e.step.to_string(), e.split.name().to_string(), e.loss.to_string()]),
    )?;
    write_run_files(out, &RunConfig { denoiser: dcfg, ..cfg.clone() }, &prov)?;
    Ok(fp)
}

pub fn load_model(path: &Path) -> Result<(UNetDenoiser, ModelMeta, String)> {
    let ck = formats::read_checkpoint(path, "denoiser")?;
    let meta: ModelMeta = ck.meta_as(path)?;
    let mut m = UNetDenoiser::new(meta.denoiser, 0)?;
    let mut store = m.params().clone();
    store.load(ck.tensors)?;
    m.set_params(store)?;
    Ok((m, meta, ck.fingerprint))
}

/// Model and codec must come from the same training chain.
fn check_trio(meta: &ModelMeta, codec_fp: &str, method: Method) -> Result<NoiseSchedule> {
    if meta.codec_sha256 != codec_fp {
        return Err(Error::Compatibility(format!(
            "model was trained with codec {} but codec {} was supplied",
            &meta.codec_sha256[..12],
            &codec_fp[..12.min(codec_fp.len())]
        )));
    }
    if meta.variant != method.train_variant() {
        return Err(Error::Compatibility(format!("method {} needs a '{}' model, got '{}'", method, method.train_variant(), meta.variant)));
    }
    Ok(NoiseSchedule::new(meta.schedule)?)
}

/// What to inpaint.
#[derive(Debug, Clone)]
pub enum InpaintSource {
    /// Normal samples of a dataset split, planned per condition cell.
    Dataset { dir: PathBuf, split: Split },
    /// One image with an explicit insertion point.
    Single { image: PathBuf, landmark: Landmark },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub file: String,
    pub sample_id: Option<usize>,
    pub input_index: usize,
    pub generation: usize,
    pub seed: u64,
    pub landmark: Landmark,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub level: Level,
    pub severity: Severity,
    pub outputs: Vec<OutputRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputsIndex {
    pub method: Method,
    pub pathology: Pathology,
    pub sampler: SamplerConfig,
    pub generations: usize,
    pub cells: Vec<CellRecord>,
    pub provenance: Provenance,
}

fn cell_dir(level: Level, sev: Severity) -> String {
    format!("{}_{}", level.name(), sev.name())
}

/// `inpaint`: insert pathology into normal inputs.
pub fn inpaint_cmd(source: &InpaintSource, method: Method, model_path: &Path, codec_path: &Path, cfg: &RunConfig, out: &Path) -> Result<OutputsIndex> {
    let (model, meta, mfp) = load_model(model_path)?;
    let (codec, cfp) = load_codec(codec_path)?;
    let sched = check_trio(&meta, &cfp, method)?;
    let sampler = SamplerConfig { method, ..cfg.sampler };
    sampler.validate(&sched)?;
    let gens = cfg.eval.generations;
    let mut up = vec![("model", mfp.as_str()), ("codec", cfp.as_str())];
    let mut cells = Vec::new();
    let dfp;
    match source {
        InpaintSource::Dataset { dir, split } => {
            let d = read_dataset(dir)?;
            ensure_pathology(&d, meta.pathology)?;
            if *split != Split::Test {
                return Err(Error::Config("inpainting plans are built from the test split".into()));
            }
            dfp = dataset_fingerprint(dir)?;
            up.push(("dataset", &dfp));
            let plans = pipeline::plan_cells(&d, cfg.eval.inputs_per_cell, cfg.eval.plan_seed)?;
            for (ci, plan) in plans.iter().enumerate() {
                let outs = pipeline::inpaint_cell(&d, plan, ci, &model, &codec, &sched, &sampler, gens)?;
                cells.push(write_cell(out, plan, ci, &outs, sampler.seed)?);
            }
        }
        InpaintSource::Single { image, landmark } => {
            if landmark.severity.pathology() != meta.pathology {
                return Err(Error::Config(format!("model inserts {}, landmark asks for {}", meta.pathology, landmark.severity.name())));
            }
            let img = formats::read_volume(image)?;
            let job = InpaintJob { image: &img, landmark, model: &model, codec: &codec, sched: &sched };
            let mut outputs = Vec::new();
            for g in 0..gens {
                let seed = pipeline::generation_seed(sampler.seed, 0, 0, g);
                let v = job.run(&SamplerConfig { seed, ..sampler }, None)?;
                let file = format!("single/g{g}.vol");
                formats::write_volume(&out.join(&file), &v)?;
                formats::write_atomic(&out.join(format!("single/g{g}.pgm")), &formats::encode_pgm(&v, v.grid.nz() / 2))?;
                outputs.push(OutputRecord { file, sample_id: None, input_index: 0, generation: g, seed, landmark: *landmark });
            }
            cells.push(CellRecord { level: landmark.level, severity: landmark.severity, outputs });
        }
    }
    let index = OutputsIndex {
        method,
        pathology: meta.pathology,
        sampler,
        generations: gens,
        cells,
        provenance: provenance("inpaint", cfg, sampler.seed, &up),
    };
    formats::write_json(&out.join(OUTPUTS_FILE), &index)?;
    write_run_files(out, cfg, &index.provenance)?;
    Ok(index)
}

fn write_cell(out: &Path, plan: &CellPlan, ci: usize, outs: &[Vec<Volume>], base_seed: u64) -> Result<CellRecord> {
    let dir = cell_dir(plan.level, plan.severity);
    let mut outputs = Vec::new();
    for (k, (inp, group)) in plan.inputs.iter().zip(outs).enumerate() {
        for (g, v) in group.iter().enumerate() {
            let file = format!("{dir}/in{k:03}_g{g}.vol");
            formats::write_volume(&out.join(&file), v)?;
            outputs.push(OutputRecord {
                file,
                sample_id: Some(inp.sample_id),
                input_index: k,
                generation: g,
                seed: pipeline::generation_seed(base_seed, ci, k, g),
                landmark: inp.landmark,
            });
        }
    }
    let rec = CellRecord { level: plan.level, severity: plan.severity, outputs };
    formats::write_json(&out.join(&dir).join("outputs.json"), &rec)?;
    Ok(rec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalFile {
    pub pathology: Pathology,
    pub reports: Vec<MethodReport>,
    /// Split-half FD of the real test patches, per `(level, severity)` cell.
    pub fd_floor: Vec<(Level, Severity, Option<f64>)>,
    pub classifier_val_accuracy: f64,
    pub provenance: Provenance,
}

/// `evaluate`: score one or more method output directories.
pub fn evaluate_cmd(outputs: &[PathBuf], testset: &Path, classifier: &Path, cfg: &RunConfig, out: &Path) -> Result<EvalFile> {
    let d = read_dataset(testset)?;
    let (clf, cmeta, clf_fp) = load_classifier(classifier)?;
    ensure_pathology(&d, cmeta.pathology)?;
    let patch_mm = cmeta.patch_mm;
    let dfp = dataset_fingerprint(testset)?;
    let mut up: Vec<(String, String)> = vec![("dataset".into(), dfp), ("classifier".into(), clf_fp)];
    let mut reports = Vec::new();
    for dir in outputs {
        let idx: OutputsIndex = formats::read_json(&dir.join(OUTPUTS_FILE))?;
        if idx.pathology != cmeta.pathology {
            return Err(Error::Compatibility(format!("{} holds {} outputs, classifier judges {}", dir.display(), idx.pathology, cmeta.pathology)));
        }
        up.push((format!("outputs:{}", idx.method), formats::file_fingerprint(&dir.join(OUTPUTS_FILE))?));
        let mut cells = Vec::new();
        for cell in &idx.cells {
            let mut groups: Vec<Vec<Patch>> = Vec::new();
            for o in &cell.outputs {
                if groups.len() <= o.input_index {
                    groups.resize_with(o.input_index + 1, Vec::new);
                }
                let v = formats::read_volume(&dir.join(&o.file))?;
                groups[o.input_index].push(gwinpaint_core::eval::crop_landmark_patch(&v, o.landmark.position_mm, patch_mm)?);
            }
            let real = pipeline::real_patches(&d, cell.level, cell.severity, patch_mm)?;
            let refs: Vec<&Patch> = real.iter().collect();
            cells.push(evaluate_cell(&CellOutputs { level: cell.level, severity: cell.severity, groups }, &refs, &clf)?);
        }
        reports.push(MethodReport { method: idx.method.display_name().into(), cells });
    }
    reports.sort_by_key(|r| Method::ALL.iter().position(|m| m.display_name() == r.method));
    let mut fd_floor = Vec::new();
    for sev in cmeta.pathology.severities() {
        for level in Level::ALL {
            let real = pipeline::real_patches(&d, level, sev, patch_mm)?;
            fd_floor.push((level, sev, split_half_fd(&real.iter().collect::<Vec<_>>(), &clf)?));
        }
    }
    let upr: Vec<(&str, &str)> = up.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    let file = EvalFile {
        pathology: cmeta.pathology,
        reports,
        fd_floor,
        classifier_val_accuracy: cmeta.val_accuracy,
        provenance: provenance("evaluate", cfg, 0, &upr),
    };
    formats::write_json(&out.join(EVAL_FILE), &file)?;
    formats::write_atomic(&out.join("cells.csv"), render_csv(&file.reports).as_bytes())?;
    formats::write_atomic(&out.join("table.txt"), render_table(file.pathology, &file.reports).as_bytes())?;
    write_run_files(out, cfg, &file.provenance)?;
    Ok(file)
}

/// `report`: render every `eval.json` found in `eval_dir` (or one level below).
pub fn report_cmd(eval_dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    if eval_dir.join(EVAL_FILE).exists() {
        files.push(eval_dir.join(EVAL_FILE));
    }
    let mut subs: Vec<PathBuf> = std::fs::read_dir(eval_dir)
        .map_err(|e| Error::io(eval_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(EVAL_FILE).exists())
        .collect();
    subs.sort();
    files.extend(subs.into_iter().map(|p| p.join(EVAL_FILE)));
    if files.is_empty() {
        return Err(Error::Core(gwinpaint_core::Error::Data(format!("no {EVAL_FILE} under {}", eval_dir.display()))));
    }
    let mut s = String::new();
    for f in files {
        let e: EvalFile = formats::read_json(&f)?;
        s.push_str(&format!("{} (classifier held-out accuracy {:.3})\n", e.pathology, e.classifier_val_accuracy));
        s.push_str(&render_table(e.pathology, &e.reports));
        s.push_str(&summary_lines(&e));
        s.push('\n');
    }
    formats::write_atomic(&eval_dir.join("report.txt"), s.as_bytes())?;
    Ok(s)
}

fn summary_lines(e: &EvalFile) -> String {
    let mut s = String::new();
    for r in &e.reports {
        let (mut rate, mut ind, mut n) = (0.0, 0.0, 0.0);
        for c in &r.cells {
            if let (Some(p), Some(i)) = (c.pathology_rate, c.in_distribution) {
                let w = c.outputs as f64;
                rate += p * w;
                ind += i * w;
                n += w;
            }
        }
        if n > 0.0 {
            s.push_str(&format!("{:<8} pathology rate {:>5.1}%  in-distribution {:>5.1}%\n", r.method, 100.0 * rate / n, 100.0 * ind / n));
        }
    }
    s
}

/// Paths of every artifact of a full run under one root.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn codec(&self) -> PathBuf {
        self.root.join("codec")
    }
    pub fn classifier(&self) -> PathBuf {
        self.root.join("classifier")
    }
    pub fn model(&self, v: TrainVariant) -> PathBuf {
        self.root.join("models").join(v.name())
    }
    pub fn outputs(&self, m: Method) -> PathBuf {
        self.root.join("outputs").join(m.name())
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
}

/// Every stage in order: data, codec, classifier, three models, inpainting
/// with each method, evaluation and report.
pub fn run_all(cfg: &RunConfig, root: &Path) -> Result<EvalFile> {
    let l = RunLayout { root: root.to_path_buf() };
    let t0 = std::time::Instant::now();
    gen_data(cfg, &l.data())?;
    log::info!("data written ({:.0?})", t0.elapsed());
    train_codec_cmd(&l.data(), None, cfg, &l.codec())?;
    log::info!("codec trained ({:.0?})", t0.elapsed());
    let codec_ck = l.codec().join(CODEC_FILE);
    train_classifier_cmd(&l.data(), cfg.pathology, Some(&codec_ck), cfg, &l.classifier())?;
    log::info!("classifier trained ({:.0?})", t0.elapsed());
    let mut outs = Vec::new();
    for m in Method::ALL {
        let v = m.train_variant();
        train_cmd(&l.data(), cfg.pathology, &codec_ck, v, cfg, &l.model(v))?;
        log::info!("{} model trained ({:.0?})", v, t0.elapsed());
        let src = InpaintSource::Dataset { dir: l.data(), split: Split::Test };
        inpaint_cmd(&src, m, &l.model(v).join(MODEL_FILE), &codec_ck, cfg, &l.outputs(m))?;
        log::info!("{} inpainting done ({:.0?})", m, t0.elapsed());
        outs.push(l.outputs(m));
    }
    let e = evaluate_cmd(&outs, &l.data(), &l.classifier().join(CLASSIFIER_FILE), cfg, &l.eval())?;
    report_cmd(&l.eval())?;
    log::info!("evaluation done ({:.0?})", t0.elapsed());
    Ok(e)
}
