//! Procedural spine-like phantoms with controllable pathology.
//!
//! A phantom is a mid-sagittal view of one functional spinal unit: two
//! vertebral bodies, the disc between them, and the CSF-filled canal behind
//! them, followed by the posterior elements. Everything is rendered in a
//! local frame `(u, v, w)` (anterior-posterior, cranio-caudal, lateral)
//! that is tilted per level and jittered per sample.
//!
//! Pathologies re-render the same parameters and noise field with one
//! deformation added, so the far field is identical to the normal base:
//! - disc herniation: a posterior bulge of the disc into the canal; the
//!   landmark is where the bulge leaves the disc margin;
//! - central canal stenosis: a narrowing of the canal at disc level; the
//!   landmark is on the canal axis at the narrowing.
//!
//! The plausible-region masks are the bands these landmarks fall in, so
//! insertion points drawn from them match the training distribution.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::geometry::{BinaryMask, Landmark, Level, Pathology, Severity, VolumeGrid};
use crate::rng::{self, Rng};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    /// In-plane size `(nx, ny)`.
    pub size: [usize; 2],
    pub spacing_mm: f64,
    /// Number of sagittal slices; 1 gives a 2-D phantom.
    pub slices: usize,
    pub slice_spacing_mm: f64,
    pub noise_sigma: f64,
    pub edge_mm: f64,
    pub position_jitter_mm: f64,
    pub intensity_jitter: f64,
    pub background: f64,
    pub body_intensity: f64,
    pub disc_intensity: f64,
    pub csf_intensity: f64,
    pub posterior_intensity: f64,
    pub body_depth_mm: f64,
    pub disc_height_mm: [f64; 5],
    pub disc_height_jitter_mm: f64,
    pub tilt_deg: [f64; 5],
    pub tilt_jitter_deg: f64,
    pub dural_gap_mm: f64,
    pub canal_width_mm: f64,
    pub canal_width_jitter_mm: f64,
    /// Lateral half-width of the canal (3-D only).
    pub canal_lateral_mm: f64,
    pub dh_depth_small_mm: [f64; 2],
    pub dh_depth_mod_large_mm: [f64; 2],
    pub dh_height_mm: f64,
    pub ccs_narrowing_moderate: [f64; 2],
    pub ccs_narrowing_severe: [f64; 2],
    pub ccs_extent_mm: f64,
    /// Lateral spread of either deformation (3-D only).
    pub lesion_lateral_mm: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: [64, 64],
            spacing_mm: 1.25,
            slices: 1,
            slice_spacing_mm: 4.0,
            noise_sigma: 0.02,
            edge_mm: 0.6,
            position_jitter_mm: 2.0,
            intensity_jitter: 0.03,
            background: 0.12,
            body_intensity: 0.45,
            disc_intensity: 0.68,
            csf_intensity: 0.95,
            posterior_intensity: 0.32,
            body_depth_mm: 34.0,
            disc_height_mm: [8.0, 9.0, 10.0, 11.0, 10.0],
            disc_height_jitter_mm: 1.0,
            tilt_deg: [-4.0, -2.0, 0.0, 3.0, 8.0],
            tilt_jitter_deg: 2.0,
            dural_gap_mm: 2.0,
            canal_width_mm: 13.0,
            canal_width_jitter_mm: 1.5,
            canal_lateral_mm: 9.0,
            dh_depth_small_mm: [2.5, 4.0],
            dh_depth_mod_large_mm: [6.0, 8.0],
            dh_height_mm: 3.0,
            ccs_narrowing_moderate: [0.30, 0.40],
            ccs_narrowing_severe: [0.60, 0.70],
            ccs_extent_mm: 4.0,
            lesion_lateral_mm: 6.0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.spacing_mm,
            self.slice_spacing_mm,
            self.edge_mm,
            self.body_depth_mm,
            self.canal_width_mm,
            self.canal_lateral_mm,
            self.dh_height_mm,
            self.ccs_extent_mm,
            self.lesion_lateral_mm,
        ];
        if self.size[0] < 16 || self.size[1] < 16 || self.slices == 0 {
            bail!(Spec, "phantom must be at least 16x16 with one slice");
        }
        if positive.iter().any(|&v| !(v > 0.0) || !v.is_finite()) || self.disc_height_mm.iter().any(|&v| !(v > 0.0)) {
            bail!(Spec, "phantom sizes must be positive");
        }
        if self.noise_sigma < 0.0 || self.dural_gap_mm < 0.0 || self.position_jitter_mm < 0.0 {
            bail!(Spec, "noise, gap and jitter must be non-negative");
        }
        let ordered = |lo: [f64; 2], hi: [f64; 2]| lo[0] > 0.0 && lo[0] <= lo[1] && lo[1] < hi[0] && hi[0] <= hi[1];
        if !ordered(self.dh_depth_small_mm, self.dh_depth_mod_large_mm) {
            bail!(Spec, "herniation depth ranges must be positive and strictly increase with severity");
        }
        if !ordered(self.ccs_narrowing_moderate, self.ccs_narrowing_severe) || self.ccs_narrowing_severe[1] >= 1.0 {
            bail!(Spec, "stenosis narrowing ranges must lie in (0, 1) and strictly increase with severity");
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<VolumeGrid> {
        if self.slices == 1 {
            VolumeGrid::new_2d(self.size, [self.spacing_mm; 2], [0.0, 0.0])
        } else {
            let half = 0.5 * (self.slices as f64 - 1.0) * self.slice_spacing_mm;
            VolumeGrid::new_3d(
                [self.size[0], self.size[1], self.slices],
                [self.spacing_mm, self.spacing_mm, self.slice_spacing_mm],
                [0.0, 0.0, -half],
            )
        }
    }

    fn range(&self, severity: Severity) -> [f64; 2] {
        match severity {
            Severity::Small => self.dh_depth_small_mm,
            Severity::ModLarge => self.dh_depth_mod_large_mm,
            Severity::Moderate => self.ccs_narrowing_moderate,
            Severity::Severe => self.ccs_narrowing_severe,
        }
    }
}

/// Per-sample anatomy, in millimetres and degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub center: [f64; 2],
    pub tilt_deg: f64,
    pub disc_height: f64,
    pub body_depth: f64,
    pub canal_width: f64,
    pub body_intensity: f64,
    pub disc_intensity: f64,
    pub csf_intensity: f64,
}

impl PhantomParams {
    /// Posterior margin of the bodies and disc on the `u` axis.
    pub fn posterior_margin(&self) -> f64 {
        0.5 * self.body_depth
    }
}

/// A pathology applied on top of the base anatomy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deformation {
    pub severity: Severity,
    /// Herniation depth in mm, or stenosis narrowing fraction.
    pub magnitude: f64,
    /// Cranio-caudal offset of the lesion centre from the disc centre, mm.
    pub v_offset: f64,
    /// Lateral position of the lesion centre, mm.
    pub w_offset: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionMasks {
    pub dh: BinaryMask,
    pub ccs: BinaryMask,
}

impl RegionMasks {
    pub fn get(&self, p: Pathology) -> &BinaryMask {
        match p {
            Pathology::Dh => &self.dh,
            Pathology::Ccs => &self.ccs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub image: Volume,
    pub level: Level,
    pub dh: Option<Severity>,
    pub ccs: Option<Severity>,
    pub landmark: Option<Landmark>,
    pub region_masks: RegionMasks,
    pub split: Split,
    pub params: PhantomParams,
    pub noise_seed: u64,
    pub deformation: Option<Deformation>,
}

impl Sample {
    pub fn label(&self, p: Pathology) -> Option<Severity> {
        match p {
            Pathology::Dh => self.dh,
            Pathology::Ccs => self.ccs,
        }
    }

    pub fn is_normal(&self) -> bool {
        self.dh.is_none() && self.ccs.is_none()
    }
}

struct Frame {
    center: [f64; 2],
    cos: f64,
    sin: f64,
}

impl Frame {
    fn new(p: &PhantomParams) -> Self {
        let th = p.tilt_deg.to_radians();
        Self { center: p.center, cos: libm::cos(th), sin: libm::sin(th) }
    }

    fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        (self.cos * dx + self.sin * dy, -self.sin * dx + self.cos * dy)
    }

    fn to_image(&self, u: f64, v: f64) -> (f64, f64) {
        (self.center[0] + self.cos * u - self.sin * v, self.center[1] + self.sin * u + self.cos * v)
    }
}

#[inline]
fn step(d: f64, edge: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-d / edge))
}

#[inline]
fn mix(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

#[inline]
fn bump(d: f64, s: f64) -> f64 {
    libm::exp(-d * d / (2.0 * s * s))
}

/// Bulge profile `depth * bump(v) * bump(w)` added to the disc's posterior margin.
fn bulge(def: Option<&Deformation>, v: f64, w: f64, spec: &PhantomSpec) -> f64 {
    match def {
        Some(d) if d.severity.pathology() == Pathology::Dh => {
            d.magnitude * bump(v - d.v_offset, spec.dh_height_mm) * bump(w - d.w_offset, spec.lesion_lateral_mm)
        }
        _ => 0.0,
    }
}

/// Canal narrowing fraction at `(v, w)`.
fn narrowing(def: Option<&Deformation>, v: f64, w: f64, spec: &PhantomSpec) -> f64 {
    match def {
        Some(d) if d.severity.pathology() == Pathology::Ccs => {
            d.magnitude * bump(v - d.v_offset, spec.ccs_extent_mm) * bump(w - d.w_offset, spec.lesion_lateral_mm)
        }
        _ => 0.0,
    }
}

/// Canal walls `(anterior, posterior)` on the `u` axis at `(v, w)`.
fn canal_walls(p: &PhantomParams, spec: &PhantomSpec, def: Option<&Deformation>, v: f64, w: f64) -> (f64, f64) {
    let front = p.posterior_margin() + spec.dural_gap_mm;
    let r = narrowing(def, v, w, spec);
    let lost = r * p.canal_width;
    (front + 0.4 * lost, front + p.canal_width - 0.6 * lost)
}

fn render(spec: &PhantomSpec, p: &PhantomParams, def: Option<&Deformation>, noise_seed: u64) -> Result<Volume> {
    let grid = spec.grid()?;
    let f = Frame::new(p);
    let e = spec.edge_mm;
    let half_h = 0.5 * p.disc_height;
    let back = p.posterior_margin();
    let front = -back;
    let mut noise = rng::seeded(noise_seed);
    let mut img = Volume::zeros(grid, 1);
    for i in 0..grid.len() {
        let c = grid.voxel_center(grid.unravel(i));
        let (u, v) = f.to_local(c[0], c[1]);
        let w = c[2];
        let lateral = if grid.nz() > 1 { step(spec.canal_lateral_mm - libm::fabs(w), e) } else { 1.0 };
        let (ca, cp) = canal_walls(p, spec, def, v, w);
        let mut val = spec.background;
        val = mix(val, spec.posterior_intensity, step(u - cp, e));
        val = mix(val, p.csf_intensity, step(u - ca, e) * step(cp - u, e) * lateral);
        let in_ap = step(u - front, e) * step(back - u, e);
        let bodies = in_ap * (step(-half_h - v, e) + step(v - half_h, e));
        val = mix(val, p.body_intensity, bodies.min(1.0));
        let disc_back = back + bulge(def, v, w, spec);
        let disc = step(u - front - 1.0, e) * step(disc_back - u, e) * step(v + half_h, e) * step(half_h - v, e);
        val = mix(val, p.disc_intensity, disc);
        val += spec.noise_sigma * rng::normal(&mut noise);
        img.data[i] = val.clamp(0.0, 1.0);
    }
    Ok(img)
}

/// Half extents of the plausible-region bands around the disc margin and
/// the canal axis (local u) and around the disc centre (local v).
const REGION_HALF_DEPTH_MM: f64 = 1.25;
const REGION_HALF_HEIGHT_MM: f64 = 2.0;

fn regions(spec: &PhantomSpec, p: &PhantomParams) -> Result<RegionMasks> {
    let grid = spec.grid()?;
    let f = Frame::new(p);
    let back = p.posterior_margin();
    let (ca, cp) = canal_walls(p, spec, None, 0.0, 0.0);
    let axis = 0.5 * (ca + cp);
    let mut dh = vec![false; grid.len()];
    let mut ccs = vec![false; grid.len()];
    for i in 0..grid.len() {
        let c = grid.voxel_center(grid.unravel(i));
        let (u, v) = f.to_local(c[0], c[1]);
        let lateral_ok = grid.nz() == 1 || libm::fabs(c[2]) <= spec.canal_lateral_mm - spec.lesion_lateral_mm * 0.5;
        let near_disc = libm::fabs(v) <= REGION_HALF_HEIGHT_MM;
        dh[i] = lateral_ok && near_disc && libm::fabs(u - back) <= REGION_HALF_DEPTH_MM;
        ccs[i] = lateral_ok && near_disc && libm::fabs(u - axis) <= REGION_HALF_DEPTH_MM;
    }
    Ok(RegionMasks { dh: BinaryMask { grid, values: dh }, ccs: BinaryMask { grid, values: ccs } })
}

fn jitter(rng: &mut Rng, scale: f64) -> f64 {
    (rng::uniform(rng) * 2.0 - 1.0) * scale
}

/// Render a normal phantom for `level`.
pub fn generate_phantom(rng: &mut Rng, spec: &PhantomSpec, level: Level) -> Result<Sample> {
    spec.validate()?;
    let grid = spec.grid()?;
    let ext = grid.extent();
    let mid = [0.5 * (ext[0].0 + ext[0].1), 0.5 * (ext[1].0 + ext[1].1)];
    let li = level.index();
    let ij = spec.intensity_jitter;
    // The canal sits behind the disc, so the anatomy is shifted anteriorly.
    let params = PhantomParams {
        center: [
            mid[0] - 0.25 * spec.canal_width_mm + jitter(rng, spec.position_jitter_mm),
            mid[1] + jitter(rng, spec.position_jitter_mm),
        ],
        tilt_deg: spec.tilt_deg[li] + jitter(rng, spec.tilt_jitter_deg),
        disc_height: spec.disc_height_mm[li] + jitter(rng, spec.disc_height_jitter_mm),
        body_depth: spec.body_depth_mm + jitter(rng, 2.0),
        canal_width: spec.canal_width_mm + jitter(rng, spec.canal_width_jitter_mm),
        body_intensity: spec.body_intensity + jitter(rng, ij),
        disc_intensity: spec.disc_intensity + jitter(rng, ij),
        csf_intensity: (spec.csf_intensity + jitter(rng, ij)).min(1.0),
    };
    let noise_seed = rng::uniform(rng).to_bits() ^ rng::derive_seed(li as u64, 0x5eed);
    let image = render(spec, &params, None, noise_seed)?;
    Ok(Sample {
        id: 0,
        image,
        level,
        dh: None,
        ccs: None,
        landmark: None,
        region_masks: regions(spec, &params)?,
        split: Split::Train,
        params,
        noise_seed,
        deformation: None,
    })
}

fn apply(sample: &Sample, severity: Severity, rng: &mut Rng, spec: &PhantomSpec) -> Result<Sample> {
    spec.validate()?;
    if !sample.is_normal() || sample.deformation.is_some() {
        bail!(State, "sample {} is already pathological", sample.id);
    }
    let [lo, hi] = spec.range(severity);
    let magnitude = lo + (hi - lo) * rng::uniform(rng);
    let v_offset = jitter(rng, 1.0);
    let w_offset = if sample.image.grid.nz() > 1 { jitter(rng, 2.0) } else { 0.0 };
    let def = Deformation { severity, magnitude, v_offset, w_offset };
    let p = &sample.params;
    let f = Frame::new(p);
    let u = match severity.pathology() {
        Pathology::Dh => p.posterior_margin(),
        Pathology::Ccs => {
            let (a, b) = canal_walls(p, spec, None, v_offset, w_offset);
            0.5 * (a + b)
        }
    };
    let (x, y) = f.to_image(u, v_offset);
    let landmark = Landmark::new([x, y, w_offset], sample.level, severity);
    let mut out = sample.clone();
    out.image = render(spec, p, Some(&def), sample.noise_seed)?;
    out.deformation = Some(def);
    out.landmark = Some(landmark);
    match severity.pathology() {
        Pathology::Dh => out.dh = Some(severity),
        Pathology::Ccs => out.ccs = Some(severity),
    }
    let g = out.image.grid;
    if !g.contains(landmark.position_mm) || !out.region_masks.get(severity.pathology()).values[g.index(g.nearest_voxel(landmark.position_mm))] {
        bail!(Spec, "lesion landmark fell outside its plausible region; spec ranges are inconsistent");
    }
    Ok(out)
}

/// Posterior disc bulge into the canal; the landmark is the bulge's base on the disc margin.
pub fn apply_herniation(sample: &Sample, severity: Severity, rng: &mut Rng, spec: &PhantomSpec) -> Result<Sample> {
    if severity.pathology() != Pathology::Dh {
        bail!(InvalidParameter, "{} is not a herniation severity", severity.name());
    }
    apply(sample, severity, rng, spec)
}

/// Canal narrowing at disc level; the landmark is on the canal axis at the narrowing.
pub fn apply_stenosis(sample: &Sample, severity: Severity, rng: &mut Rng, spec: &PhantomSpec) -> Result<Sample> {
    if severity.pathology() != Pathology::Ccs {
        bail!(InvalidParameter, "{} is not a stenosis severity", severity.name());
    }
    apply(sample, severity, rng, spec)
}

/// Canal width (mm) along the local `u` axis at the disc centre, measured
/// from the rendered geometry.
pub fn canal_width_at_disc(sample: &Sample, spec: &PhantomSpec) -> f64 {
    let (v, w) = sample.deformation.map_or((0.0, 0.0), |d| (d.v_offset, d.w_offset));
    let (a, b) = canal_walls(&sample.params, spec, sample.deformation.as_ref(), v, w);
    b - a
}

/// Relative share of normal samples and each severity in a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathologyMix {
    pub pathology: Pathology,
    pub normal: f64,
    /// Shares of `pathology.severities()` in rank order.
    pub severities: [f64; 2],
}

impl PathologyMix {
    pub fn new(pathology: Pathology) -> Self {
        Self { pathology, normal: 0.4, severities: [0.3, 0.3] }
    }

    fn shares(&self) -> Result<[f64; 3]> {
        let s = [self.normal, self.severities[0], self.severities[1]];
        let total: f64 = s.iter().sum();
        if s.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || !(total > 0.0) {
            bail!(Config, "pathology mix shares must be non-negative with a positive sum");
        }
        Ok([s[0] / total, s[1] / total, s[2] / total])
    }
}

/// Split `n` into parts proportional to `shares` (largest remainder).
pub fn apportion(n: usize, shares: &[f64]) -> Vec<usize> {
    let total: f64 = shares.iter().sum();
    let exact: Vec<f64> = shares.iter().map(|s| n as f64 * s / total).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| libm::floor(*e) as usize).collect();
    let mut rest = n - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - libm::floor(exact[a]);
        let fb = exact[b] - libm::floor(exact[b]);
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        out[i] += 1;
        rest -= 1;
    }
    out
}

pub const SPLIT_SHARES: [f64; 3] = [0.7, 0.1, 0.2];

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: PhantomSpec,
    pub mix: PathologyMix,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

/// One row of the dataset summary: counts per split for a level/condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportRow {
    pub level: Level,
    /// `None` for normal samples.
    pub severity: Option<Severity>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn summary(&self) -> Vec<SupportRow> {
        let mut rows = Vec::new();
        for level in Level::ALL {
            let conds = [None, Some(self.mix.pathology.severities()[0]), Some(self.mix.pathology.severities()[1])];
            for sev in conds {
                let mut row = SupportRow { level, severity: sev, train: 0, val: 0, test: 0 };
                for s in self.samples.iter().filter(|s| s.level == level && s.label(self.mix.pathology) == sev) {
                    match s.split {
                        Split::Train => row.train += 1,
                        Split::Val => row.val += 1,
                        Split::Test => row.test += 1,
                    }
                }
                rows.push(row);
            }
        }
        rows
    }
}

/// Generate `n` samples for one pathology, stratified by level and
/// condition, with per-stratum 70/10/20 train/val/test splits.
pub fn make_dataset(n: usize, mix: PathologyMix, spec: &PhantomSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let shares = mix.shares()?;
    let per_level = apportion(n, &[1.0; 5]);
    let sevs = mix.pathology.severities();
    let mut plan: Vec<(Level, Option<Severity>, Split)> = Vec::with_capacity(n);
    let mut order_rng = rng::stream(seed, 0);
    for (li, &count) in per_level.iter().enumerate() {
        let level = Level::ALL[li];
        let per_cond = apportion(count, &shares);
        for (ci, &m) in per_cond.iter().enumerate() {
            if m == 0 {
                continue;
            }
            if m < 3 {
                bail!(Data, "n = {} leaves only {} samples in stratum {} / condition {}; need at least 3", n, m, level, ci);
            }
            let splits = apportion(m, &SPLIT_SHARES);
            if splits.iter().any(|&s| s == 0) {
                bail!(Data, "n = {} is too small to split stratum {} / condition {}", n, level, ci);
            }
            let mut labels: Vec<Split> = Vec::with_capacity(m);
            for (si, &c) in splits.iter().enumerate() {
                labels.extend(core::iter::repeat(Split::ALL[si]).take(c));
            }
            rng::shuffle(&mut order_rng, &mut labels);
            let sev = if ci == 0 { None } else { Some(sevs[ci - 1]) };
            plan.extend(labels.into_iter().map(|s| (level, sev, s)));
        }
    }
    let mut samples = Vec::with_capacity(n);
    for (id, (level, sev, split)) in plan.into_iter().enumerate() {
        let mut r = rng::stream(rng::derive_seed(seed, 1), id as u64);
        let mut s = generate_phantom(&mut r, spec, level)?;
        s.id = id;
        s.split = split;
        if let Some(sev) = sev {
            s = apply(&s, sev, &mut r, spec)?;
        }
        samples.push(s);
    }
    Ok(Dataset { spec: *spec, mix, seed, samples })
}
