//! Dataset directories.
//!
//! ```text
//! <dir>/dataset.json        spec, mix, seed, per-sample generator parameters, support summary
//! <dir>/manifest.csv        one row per sample (see MANIFEST_COLUMNS)
//! <dir>/summary.csv         per level/condition counts per split
//! <dir>/images/NNNNN.vol    image volumes
//! <dir>/masks/NNNNN_dh.vol  pathology-plausible regions (u8)
//! <dir>/masks/NNNNN_ccs.vol
//! ```

use std::path::Path;

use gwinpaint_core::synthdata::{Dataset, Deformation, PathologyMix, PhantomParams, PhantomSpec, RegionMasks, Sample, Split, SupportRow};
use gwinpaint_core::{Landmark, Level, Severity};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats;

pub const MANIFEST_COLUMNS: [&str; 12] = [
    "id", "image", "level", "dh", "ccs", "severity", "landmark_x_mm", "landmark_y_mm", "landmark_z_mm", "region_dh", "region_ccs", "split",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorRecord {
    pub id: usize,
    pub params: PhantomParams,
    pub noise_seed: u64,
    pub deformation: Option<Deformation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub seed: u64,
    pub samples: usize,
    pub spec: PhantomSpec,
    pub mix: PathologyMix,
    pub summary: Vec<SupportRow>,
    pub generator: Vec<GeneratorRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestRow {
    id: usize,
    image: String,
    level: Level,
    dh: String,
    ccs: String,
    severity: String,
    landmark_x_mm: String,
    landmark_y_mm: String,
    landmark_z_mm: String,
    region_dh: String,
    region_ccs: String,
    split: Split,
}

fn opt_name(s: Option<Severity>) -> String {
    s.map_or_else(|| "normal".into(), |v| v.name().into())
}

fn parse_label(path: &Path, s: &str) -> Result<Option<Severity>> {
    if s == "normal" {
        return Ok(None);
    }
    Severity::parse(s).map(Some).ok_or_else(|| Error::format(path, format!("unknown label '{s}'")))
}

pub fn write_dataset(dir: &Path, d: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in &d.samples {
        let img = format!("images/{:05}.vol", s.id);
        let rd = format!("masks/{:05}_dh.vol", s.id);
        let rc = format!("masks/{:05}_ccs.vol", s.id);
        formats::write_volume(&dir.join(&img), &s.image)?;
        formats::write_mask(&dir.join(&rd), &s.region_masks.dh)?;
        formats::write_mask(&dir.join(&rc), &s.region_masks.ccs)?;
        let lm = s.landmark.map(|l| l.position_mm);
        let coord = |a: usize| lm.map_or_else(String::new, |p| format!("{}", p[a]));
        w.serialize(ManifestRow {
            id: s.id,
            image: img,
            level: s.level,
            dh: opt_name(s.dh),
            ccs: opt_name(s.ccs),
            severity: s.landmark.map_or_else(String::new, |l| l.severity.name().into()),
            landmark_x_mm: coord(0),
            landmark_y_mm: coord(1),
            landmark_z_mm: coord(2),
            region_dh: rd,
            region_ccs: rc,
            split: s.split,
        })
        .map_err(|e| Error::format(dir, e.to_string()))?;
    }
    let manifest = w.into_inner().map_err(|e| Error::format(dir, e.to_string()))?;
    formats::write_atomic(&dir.join("manifest.csv"), &manifest)?;

    let summary = d.summary();
    let mut sw = csv::Writer::from_writer(Vec::new());
    sw.write_record(["level", "condition", "train", "val", "test"]).unwrap();
    for r in &summary {
        let cond = r.severity.map_or("normal", |s| s.name());
        sw.write_record([r.level.name(), cond, &r.train.to_string(), &r.val.to_string(), &r.test.to_string()]).unwrap();
    }
    formats::write_atomic(&dir.join("summary.csv"), &sw.into_inner().unwrap())?;

    let meta = DatasetMeta {
        format_version: 1,
        seed: d.seed,
        samples: d.samples.len(),
        spec: d.spec,
        mix: d.mix,
        summary,
        generator: d
            .samples
            .iter()
            .map(|s| GeneratorRecord { id: s.id, params: s.params, noise_seed: s.noise_seed, deformation: s.deformation })
            .collect(),
    };
    formats::write_json(&dir.join("dataset.json"), &meta)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("dataset.json");
    let meta: DatasetMeta = formats::read_json(&meta_path)?;
    if meta.format_version != 1 {
        return Err(Error::format(&meta_path, format!("unsupported format version {}", meta.format_version)));
    }
    let mpath = dir.join("manifest.csv");
    let bytes = formats::read(&mpath)?;
    let mut rdr = csv::Reader::from_reader(bytes.as_slice());
    let headers = rdr.headers().map_err(|e| Error::format(&mpath, e.to_string()))?.clone();
    if headers.iter().ne(MANIFEST_COLUMNS.iter().copied()) {
        return Err(Error::format(&mpath, "unexpected manifest columns"));
    }
    let mut samples = Vec::with_capacity(meta.samples);
    for (row, gen) in rdr.deserialize::<ManifestRow>().zip(&meta.generator) {
        let row = row.map_err(|e| Error::format(&mpath, e.to_string()))?;
        if row.id != gen.id {
            return Err(Error::format(&mpath, format!("row {} does not match generator record {}", row.id, gen.id)));
        }
        let (dh, ccs) = (parse_label(&mpath, &row.dh)?, parse_label(&mpath, &row.ccs)?);
        let landmark = if row.severity.is_empty() {
            None
        } else {
            let sev = parse_label(&mpath, &row.severity)?.ok_or_else(|| Error::format(&mpath, "landmark without severity"))?;
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::format(&mpath, format!("bad coordinate '{s}'")));
            Some(Landmark::new([num(&row.landmark_x_mm)?, num(&row.landmark_y_mm)?, num(&row.landmark_z_mm)?], row.level, sev))
        };
        if landmark.is_some() != (dh.is_some() || ccs.is_some()) {
            return Err(Error::format(&mpath, format!("sample {}: labels and landmark disagree", row.id)));
        }
        samples.push(Sample {
            id: row.id,
            image: formats::read_volume(&dir.join(&row.image))?,
            level: row.level,
            dh,
            ccs,
            landmark,
            region_masks: RegionMasks { dh: formats::read_mask(&dir.join(&row.region_dh))?, ccs: formats::read_mask(&dir.join(&row.region_ccs))? },
            split: row.split,
            params: gen.params,
            noise_seed: gen.noise_seed,
            deformation: gen.deformation,
        });
    }
    if samples.len() != meta.samples {
        return Err(Error::format(&mpath, format!("manifest has {} rows, dataset.json says {}", samples.len(), meta.samples)));
    }
    Ok(Dataset { spec: meta.spec, mix: meta.mix, seed: meta.seed, samples })
}

/// Fingerprint of a dataset directory: hash of its manifest and metadata.
pub fn dataset_fingerprint(dir: &Path) -> Result<String> {
    let mut bytes = formats::read(&dir.join("dataset.json"))?;
    bytes.extend(formats::read(&dir.join("manifest.csv"))?);
    Ok(formats::sha256_hex(&bytes))
}
