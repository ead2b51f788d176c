//! Landmark-patch metrics: Fréchet feature distance, MS-SSIM diversity and
//! a small realism/pathology classifier that doubles as feature extractor.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::geometry::{Landmark, Level, Pathology, Severity};
use crate::nn::{clip_grad_norm, Adam, Conv2d, Graph, Linear, ParamStore, Tensor, Var};
use crate::rng::{self, Rng};
use crate::sampling::sample_insertion_point;
use crate::synthdata::{Dataset, Sample, Split};
use crate::volume::Volume;

pub const DEFAULT_PATCH_MM: [f64; 3] = [25.0, 25.0, 50.0];

/// A landmark-centred crop. Voxels outside the source image are 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub data: Vec<f64>,
    /// `(nx, ny, nz)`, x fastest.
    pub shape: [usize; 3],
    pub padded: bool,
    pub padded_voxels: usize,
    /// Index range per axis that lies inside the source image.
    pub valid: [(usize, usize); 3],
}

impl Patch {
    pub fn new_2d(data: Vec<f64>, nx: usize, ny: usize) -> Result<Self> {
        if data.len() != nx * ny || nx == 0 || ny == 0 {
            bail!(Shape, "patch data has {} values for {}x{}", data.len(), nx, ny);
        }
        Ok(Self { data, shape: [nx, ny, 1], padded: false, padded_voxels: 0, valid: [(0, nx), (0, ny), (0, 1)] })
    }

    pub fn plane(&self, z: usize) -> &[f64] {
        let p = self.shape[0] * self.shape[1];
        &self.data[z * p..(z + 1) * p]
    }

    /// The slice through the landmark.
    pub fn central_plane(&self) -> &[f64] {
        self.plane(self.shape[2] / 2)
    }
}

/// Crop an `extent_mm` box centred on the voxel nearest to the landmark.
pub fn crop_landmark_patch(image: &Volume, landmark: [f64; 3], extent_mm: [f64; 3]) -> Result<Patch> {
    let g = image.grid;
    if image.channels != 1 {
        bail!(Shape, "patches are cropped from single-channel images, got {} channels", image.channels);
    }
    if !landmark.iter().all(|v| v.is_finite()) || !g.contains(landmark) {
        bail!(InvalidLandmark, "landmark {:?} lies outside the image", landmark);
    }
    let sp = g.spacing();
    let shape = g.shape();
    let center = g.nearest_voxel(landmark);
    let mut n = [1usize; 3];
    let mut start = [0i64; 3];
    for a in 0..g.ndim() {
        if !(extent_mm[a] > 0.0) {
            bail!(InvalidParameter, "patch extent must be positive");
        }
        n[a] = (libm::round(extent_mm[a] / sp[a]) as usize).max(1);
        start[a] = center[a] as i64 - (n[a] / 2) as i64;
    }
    let mut valid = [(0, 0); 3];
    for a in 0..3 {
        let lo = (-start[a]).clamp(0, n[a] as i64) as usize;
        let hi = (shape[a] as i64 - start[a]).clamp(0, n[a] as i64) as usize;
        valid[a] = (lo, hi.max(lo));
    }
    let mut data = vec![0.0; n[0] * n[1] * n[2]];
    let mut padded_voxels = 0;
    for z in 0..n[2] {
        for y in 0..n[1] {
            for x in 0..n[0] {
                let src = [start[0] + x as i64, start[1] + y as i64, start[2] + z as i64];
                let inside = (0..3).all(|a| src[a] >= 0 && (src[a] as usize) < shape[a]);
                let o = x + n[0] * (y + n[1] * z);
                if inside {
                    data[o] = image.data[g.index([src[0] as usize, src[1] as usize, src[2] as usize])];
                } else {
                    padded_voxels += 1;
                }
            }
        }
    }
    Ok(Patch { data, shape: n, padded: padded_voxels > 0, padded_voxels, valid })
}

/// Mean and unbiased covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            bail!(Data, "empty feature set");
        };
        let d = first.len();
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            bail!(Shape, "feature rows must share a positive dimension");
        }
        let n = rows.len();
        let mut mean = DVector::zeros(d);
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        if n > 1 {
            for r in rows {
                let c = DVector::from_iterator(d, r.iter().zip(mean.iter()).map(|(v, m)| v - m));
                cov += &c * c.transpose();
            }
            cov /= (n - 1) as f64;
        }
        Ok(Self { mean, cov, count: n })
    }

    pub fn from_moments(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            bail!(Shape, "covariance is {}x{}, mean has {} entries", cov.nrows(), cov.ncols(), d);
        }
        Ok(Self { mean: DVector::from_vec(mean), cov, count: 0 })
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let vals = e.eigenvalues.map(|v| libm::sqrt(v.max(0.0)));
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    // tr((AB)^1/2) = tr((A^1/2 B A^1/2)^1/2) for PSD A, B.
    let ra = psd_sqrt(a);
    let m = &ra * b * &ra;
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().map(|v| libm::sqrt(v.max(0.0))).sum()
}

pub fn frechet_from_stats(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        bail!(Shape, "feature dimensions differ: {} vs {}", a.mean.len(), b.mean.len());
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let base = a.cov.trace() + b.cov.trace();
    let mut ts = trace_sqrt_product(&a.cov, &b.cov);
    if !ts.is_finite() {
        let eye = DMatrix::<f64>::identity(a.mean.len(), a.mean.len()) * 1e-6;
        ts = trace_sqrt_product(&(&a.cov + &eye), &(&b.cov + &eye));
    }
    let d = diff + base - 2.0 * ts;
    if !d.is_finite() {
        bail!(Numerical, "Fréchet distance is not finite");
    }
    Ok(d.max(0.0))
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    frechet_from_stats(&GaussianStats::from_features(a)?, &GaussianStats::from_features(b)?)
}

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WIN: usize = 11;
const WIN_SIGMA: f64 = 1.5;
/// Smallest side accepted by the five-scale pyramid with an 11-tap window.
pub const MS_SSIM_MIN_SIDE: usize = 176;

#[derive(Debug, Clone, PartialEq)]
struct Image {
    w: usize,
    h: usize,
    px: Vec<f64>,
}

fn gaussian_window() -> [f64; WIN] {
    let mut g = [0.0; WIN];
    let half = (WIN / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = libm::exp(-d * d / (2.0 * WIN_SIGMA * WIN_SIGMA));
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable valid-mode filter.
fn filter_valid(im: &Image, g: &[f64; WIN]) -> Image {
    let (w, h) = (im.w, im.h);
    let ho = h + 1 - WIN;
    let wo = w + 1 - WIN;
    let mut tmp = vec![0.0; ho * w];
    for y in 0..ho {
        for x in 0..w {
            tmp[y * w + x] = (0..WIN).map(|k| g[k] * im.px[(y + k) * w + x]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..WIN).map(|k| g[k] * tmp[y * w + x + k]).sum();
        }
    }
    Image { w: wo, h: ho, px: out }
}

/// 2x2 average pooling; odd sides are zero-padded by one on both ends.
fn avg_pool2(im: &Image) -> Image {
    let (pw, ph) = (im.w % 2, im.h % 2);
    let wo = (im.w + 2 * pw - 2) / 2 + 1;
    let ho = (im.h + 2 * ph - 2) / 2 + 1;
    let at = |x: i64, y: i64| -> f64 {
        if x < 0 || y < 0 || x >= im.w as i64 || y >= im.h as i64 {
            0.0
        } else {
            im.px[y as usize * im.w + x as usize]
        }
    };
    let mut px = vec![0.0; wo * ho];
    for y in 0..ho {
        for x in 0..wo {
            let (x0, y0) = (2 * x as i64 - pw as i64, 2 * y as i64 - ph as i64);
            px[y * wo + x] = 0.25 * (at(x0, y0) + at(x0 + 1, y0) + at(x0, y0 + 1) + at(x0 + 1, y0 + 1));
        }
    }
    Image { w: wo, h: ho, px }
}

/// Bilinear resize with half-pixel centres.
fn resize_bilinear(im: &Image, wo: usize, ho: usize) -> Image {
    let src = |dst: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (libm::floor(s) as usize).min(n_in - 1);
        let i1 = if i0 < n_in - 1 { i0 + 1 } else { i0 };
        (i0, i1, s - i0 as f64)
    };
    let mut px = vec![0.0; wo * ho];
    for y in 0..ho {
        let (y0, y1, ly) = src(y, im.h, ho);
        for x in 0..wo {
            let (x0, x1, lx) = src(x, im.w, wo);
            let top = (1.0 - lx) * im.px[y0 * im.w + x0] + lx * im.px[y0 * im.w + x1];
            let bot = (1.0 - lx) * im.px[y1 * im.w + x0] + lx * im.px[y1 * im.w + x1];
            px[y * wo + x] = (1.0 - ly) * top + ly * bot;
        }
    }
    Image { w: wo, h: ho, px }
}

fn upsample_for_pyramid(im: Image) -> Image {
    let side = im.w.min(im.h);
    if side >= MS_SSIM_MIN_SIDE {
        return im;
    }
    let s = MS_SSIM_MIN_SIDE as f64 / side as f64;
    let wo = libm::round(im.w as f64 * s) as usize;
    let ho = libm::round(im.h as f64 * s) as usize;
    resize_bilinear(&im, wo, ho)
}

fn ssim_cs(a: &Image, b: &Image, g: &[f64; WIN]) -> (f64, f64) {
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;
    let prod = |f: &dyn Fn(f64, f64) -> f64| Image { w: a.w, h: a.h, px: a.px.iter().zip(&b.px).map(|(&x, &y)| f(x, y)).collect() };
    let mu1 = filter_valid(a, g);
    let mu2 = filter_valid(b, g);
    let s11 = filter_valid(&prod(&|x, _| x * x), g);
    let s22 = filter_valid(&prod(&|_, y| y * y), g);
    let s12 = filter_valid(&prod(&|x, y| x * y), g);
    let n = mu1.px.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mu1.px.len() {
        let (m1, m2) = (mu1.px[i], mu2.px[i]);
        let v1 = s11.px[i] - m1 * m1;
        let v2 = s22.px[i] - m2 * m2;
        let v12 = s12.px[i] - m1 * m2;
        let c = (2.0 * v12 + c2) / (v1 + v2 + c2);
        cs += c;
        ssim += (2.0 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1) * c;
    }
    (ssim / n, cs / n)
}

/// Five-scale MS-SSIM of two `nx x ny` images with data range 1. Images
/// with a side below [`MS_SSIM_MIN_SIDE`] are bilinearly upsampled first.
pub fn ms_ssim_2d(a: &[f64], b: &[f64], nx: usize, ny: usize) -> Result<f64> {
    if a.len() != b.len() || a.len() != nx * ny {
        bail!(Shape, "ms-ssim inputs have {} and {} values for {}x{}", a.len(), b.len(), nx, ny);
    }
    if nx < 2 || ny < 2 {
        bail!(Size, "ms-ssim needs at least 2x2 inputs, got {}x{}", nx, ny);
    }
    if !a.iter().chain(b).all(|v| v.is_finite()) {
        bail!(Numerical, "ms-ssim inputs are not finite");
    }
    let mut x = upsample_for_pyramid(Image { w: nx, h: ny, px: a.to_vec() });
    let mut y = upsample_for_pyramid(Image { w: nx, h: ny, px: b.to_vec() });
    let g = gaussian_window();
    let mut value = 1.0;
    for (level, &wt) in MS_SSIM_WEIGHTS.iter().enumerate() {
        if x.w < WIN || x.h < WIN {
            bail!(Size, "ms-ssim scale {} is {}x{}, below the {}-tap window", level, x.w, x.h, WIN);
        }
        let (s, cs) = ssim_cs(&x, &y, &g);
        let term = if level + 1 < MS_SSIM_WEIGHTS.len() { cs } else { s };
        value *= libm::pow(term.max(0.0), wt);
        if level + 1 < MS_SSIM_WEIGHTS.len() {
            x = avg_pool2(&x);
            y = avg_pool2(&y);
        }
    }
    Ok(value)
}

/// MS-SSIM of two patches, averaged over the in-image slices.
pub fn ms_ssim(a: &Patch, b: &Patch) -> Result<f64> {
    if a.shape != b.shape {
        bail!(Shape, "patch shapes differ: {:?} vs {:?}", a.shape, b.shape);
    }
    let (lo, hi) = (a.valid[2].0.max(b.valid[2].0), a.valid[2].1.min(b.valid[2].1));
    let (lo, hi) = if lo < hi { (lo, hi) } else { (a.shape[2] / 2, a.shape[2] / 2 + 1) };
    let mut s = 0.0;
    for z in lo..hi {
        s += ms_ssim_2d(a.plane(z), b.plane(z), a.shape[0], a.shape[1])?;
    }
    Ok(s / (hi - lo) as f64)
}

/// Mean MS-SSIM over all unordered pairs in `group`; `None` with fewer than two.
pub fn mean_pairwise_ms_ssim(group: &[Patch]) -> Result<Option<f64>> {
    let mut s = 0.0;
    let mut n = 0usize;
    for i in 0..group.len() {
        for j in i + 1..group.len() {
            s += ms_ssim(&group[i], &group[j])?;
            n += 1;
        }
    }
    Ok((n > 0).then(|| s / n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchClass {
    Normal,
    Pathology,
    /// Grossly corrupted content that no generator should produce.
    Implausible,
}

impl PatchClass {
    pub const ALL: [PatchClass; 3] = [PatchClass::Normal, PatchClass::Pathology, PatchClass::Implausible];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatch {
    pub patch: Patch,
    pub class: PatchClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    /// Input plane side in voxels.
    pub patch_size: [usize; 2],
    pub width: usize,
    pub feature_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_every: usize,
    pub augment: bool,
    pub min_accuracy: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            patch_size: [20, 20],
            width: 8,
            feature_dim: 16,
            steps: 2000,
            batch_size: 32,
            lr: 2e-3,
            eval_every: 100,
            augment: true,
            min_accuracy: 0.9,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size.iter().any(|&s| s < 4) || self.width == 0 || self.feature_dim == 0 {
            bail!(Config, "classifier needs patches of at least 4x4 and nonzero widths");
        }
        if self.batch_size == 0 || self.eval_every == 0 || !(self.lr > 0.0) {
            bail!(Config, "classifier needs batch_size >= 1, eval_every >= 1, lr > 0");
        }
        Ok(())
    }

    fn reduced(&self) -> [usize; 2] {
        let half = |n: usize| (n + 1) / 2;
        [half(half(self.patch_size[0])), half(half(self.patch_size[1]))]
    }
}

#[derive(Debug, Clone)]
struct ClassifierLayers {
    convs: [Conv2d; 3],
    feat: Linear,
    head: Linear,
}

/// Three-way patch classifier; its penultimate activations are the
/// feature space for the Fréchet distance.
#[derive(Debug, Clone)]
pub struct PatchClassifier {
    config: ClassifierConfig,
    pathology: Pathology,
    params: ParamStore,
    layers: ClassifierLayers,
}

impl PatchClassifier {
    pub fn new(config: ClassifierConfig, pathology: Pathology, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, 0xc1a5);
        let mut p = ParamStore::new();
        let w = config.width;
        let [rx, ry] = config.reduced();
        let convs = [
            Conv2d::new(&mut p, "conv0", 1, w, 3, 1, 1.0, &mut r),
            Conv2d::new(&mut p, "conv1", w, 2 * w, 3, 2, 1.0, &mut r),
            Conv2d::new(&mut p, "conv2", 2 * w, 2 * w, 3, 2, 1.0, &mut r),
        ];
        let feat = Linear::new(&mut p, "feat", 2 * w * rx * ry, config.feature_dim, 1.0, &mut r);
        let head = Linear::new(&mut p, "head", config.feature_dim, PatchClass::ALL.len(), 1.0, &mut r);
        Ok(Self { config, pathology, params: p, layers: ClassifierLayers { convs, feat, head } })
    }

    pub fn from_parts(config: ClassifierConfig, pathology: Pathology, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut c = Self::new(config, pathology, 0)?;
        c.params.load(named)?;
        Ok(c)
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }
    pub fn pathology(&self) -> Pathology {
        self.pathology
    }
    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn input(&self, patches: &[&Patch]) -> Result<Tensor> {
        let [nx, ny] = self.config.patch_size;
        let mut data = Vec::with_capacity(patches.len() * nx * ny);
        for p in patches {
            if p.shape[0] != nx || p.shape[1] != ny {
                bail!(Shape, "classifier expects {}x{} patches, got {}x{}", nx, ny, p.shape[0], p.shape[1]);
            }
            data.extend_from_slice(p.central_plane());
        }
        Ok(Tensor::new(&[patches.len(), 1, ny, nx], data))
    }

    fn graph(&self, g: &mut Graph, x: Var, n: usize) -> (Var, Var) {
        let mut h = x;
        for c in &self.layers.convs {
            h = c.forward(g, h);
            h = g.silu(h);
        }
        let [rx, ry] = self.config.reduced();
        let flat = g.reshape(h, &[n, 2 * self.config.width * rx * ry]);
        let f = self.layers.feat.forward(g, flat);
        let f = g.silu(f);
        let logits = self.layers.head.forward(g, f);
        (f, logits)
    }

    /// Penultimate features and class probabilities per patch.
    pub fn run(&self, patches: &[&Patch]) -> Result<(Vec<Vec<f64>>, Vec<[f64; 3]>)> {
        if patches.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let mut g = Graph::new(&self.params);
        let x = g.input(self.input(patches)?);
        let (f, logits) = self.graph(&mut g, x, patches.len());
        let d = self.config.feature_dim;
        let feats = g.value(f).data.chunks(d).map(|c| c.to_vec()).collect();
        let probs = g.value(logits).data.chunks(3).map(softmax3).collect();
        Ok((feats, probs))
    }

    pub fn features(&self, patches: &[&Patch]) -> Result<Vec<Vec<f64>>> {
        Ok(self.run(patches)?.0)
    }

    pub fn probabilities(&self, patches: &[&Patch]) -> Result<Vec<[f64; 3]>> {
        Ok(self.run(patches)?.1)
    }

    pub fn predict(&self, patches: &[&Patch]) -> Result<Vec<PatchClass>> {
        Ok(self.probabilities(patches)?.iter().map(|p| PatchClass::ALL[argmax(p)]).collect())
    }

    /// Accuracy on a labelled set, overall and per class (`None` when a class is absent).
    pub fn accuracy(&self, set: &[LabeledPatch]) -> Result<(f64, [Option<f64>; 3])> {
        let mut hit = [0usize; 3];
        let mut tot = [0usize; 3];
        for chunk in set.chunks(256) {
            let refs: Vec<&Patch> = chunk.iter().map(|l| &l.patch).collect();
            for (l, p) in chunk.iter().zip(self.predict(&refs)?) {
                tot[l.class.index()] += 1;
                hit[l.class.index()] += (p == l.class) as usize;
            }
        }
        let all = tot.iter().sum::<usize>().max(1) as f64;
        let per = core::array::from_fn(|i| (tot[i] > 0).then(|| hit[i] as f64 / tot[i] as f64));
        Ok((hit.iter().sum::<usize>() as f64 / all, per))
    }
}

fn softmax3(l: &[f64]) -> [f64; 3] {
    let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: [f64; 3] = core::array::from_fn(|i| libm::exp(l[i] - m));
    let s: f64 = e.iter().sum();
    core::array::from_fn(|i| e[i] / s)
}

fn argmax(p: &[f64; 3]) -> usize {
    (0..3).fold(0, |b, i| if p[i] > p[b] { i } else { b })
}

fn blur_plane(px: &mut [f64], nx: usize, ny: usize, sigma: f64) {
    let r = libm::ceil(3.0 * sigma) as i64;
    let k: Vec<f64> = (-r..=r).map(|d| libm::exp(-(d * d) as f64 / (2.0 * sigma * sigma))).collect();
    let ks: f64 = k.iter().sum();
    let clampi = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let src = px.to_vec();
    let mut tmp = vec![0.0; px.len()];
    for y in 0..ny {
        for x in 0..nx {
            tmp[y * nx + x] = (-r..=r).map(|d| k[(d + r) as usize] * src[y * nx + clampi(x as i64 + d, nx)]).sum::<f64>() / ks;
        }
    }
    for y in 0..ny {
        for x in 0..nx {
            px[y * nx + x] = (-r..=r).map(|d| k[(d + r) as usize] * tmp[clampi(y as i64 + d, ny) * nx + x]).sum::<f64>() / ks;
        }
    }
}

/// Mild blur and noise so the classifier tolerates codec smoothing.
pub fn augment(p: &Patch, rng: &mut Rng) -> Patch {
    let mut out = p.clone();
    let (nx, ny) = (p.shape[0], p.shape[1]);
    let pl = nx * ny;
    if rng::uniform(rng) < 0.5 {
        let s = rng::uniform_range(rng, 0.4, 1.2);
        for z in 0..p.shape[2] {
            blur_plane(&mut out.data[z * pl..(z + 1) * pl], nx, ny, s);
        }
    }
    let sd = rng::uniform_range(rng, 0.0, 0.03);
    out.data.iter_mut().for_each(|v| *v = (*v + sd * rng::normal(rng)).clamp(0.0, 1.0));
    out
}

/// A grossly corrupted variant of a real patch.
pub fn corrupt(p: &Patch, rng: &mut Rng) -> Patch {
    let mut out = p.clone();
    let (nx, ny) = (p.shape[0], p.shape[1]);
    let kind = rng::below(rng, 6);
    let n = out.data.len();
    match kind {
        0 => {
            let m = rng::uniform(rng);
            out.data.iter_mut().for_each(|v| *v = (m + 0.3 * rng::normal(rng)).clamp(0.0, 1.0));
        }
        1 => out.data.iter_mut().for_each(|v| *v = 1.0 - *v),
        2 => out.data.iter_mut().for_each(|v| *v = (*v + 0.25 * rng::normal(rng)).clamp(0.0, 1.0)),
        3 => {
            let c = rng::uniform(rng);
            out.data.iter_mut().for_each(|v| *v = (c + 0.02 * rng::normal(rng)).clamp(0.0, 1.0));
        }
        4 => {
            let b = 4;
            let mut blocks: Vec<(usize, usize)> = (0..ny / b).flat_map(|y| (0..nx / b).map(move |x| (x, y))).collect();
            let orig = blocks.clone();
            rng::shuffle(rng, &mut blocks);
            let src = p.data.clone();
            for z in 0..p.shape[2] {
                for (&(dx, dy), &(sx, sy)) in orig.iter().zip(&blocks) {
                    for yy in 0..b {
                        for xx in 0..b {
                            out.data[z * nx * ny + (dy * b + yy) * nx + dx * b + xx] = src[z * nx * ny + (sy * b + yy) * nx + sx * b + xx];
                        }
                    }
                }
            }
        }
        _ => {
            let f = rng::uniform_range(rng, 0.5, 1.5);
            let ph = rng::uniform_range(rng, 0.0, 6.3);
            for i in 0..n {
                let x = (i % nx) as f64;
                let y = ((i / nx) % ny) as f64;
                out.data[i] = 0.5 + 0.45 * libm::sin(f * (x + 0.7 * y) + ph);
            }
        }
    }
    out
}

/// Landmark patches of a dataset split: pathological samples at their
/// landmark, normal ones at a random point of the pathology's region.
pub fn classifier_patches(dataset: &Dataset, split: Split, extent_mm: [f64; 3], seed: u64) -> Result<Vec<LabeledPatch>> {
    let p = dataset.mix.pathology;
    let mut out = Vec::new();
    for s in dataset.split(split) {
        let mut r = rng::stream(seed, s.id as u64);
        let (lm, class) = classifier_site(s, p, &mut r)?;
        out.push(LabeledPatch { patch: crop_landmark_patch(&s.image, lm.position_mm, extent_mm)?, class });
    }
    Ok(out)
}

pub fn classifier_site(s: &Sample, p: Pathology, r: &mut Rng) -> Result<(Landmark, PatchClass)> {
    match (s.label(p), s.landmark) {
        (Some(_), Some(lm)) => Ok((lm, PatchClass::Pathology)),
        (None, _) => Ok((sample_insertion_point(s.region_masks.get(p), p.severities()[0], s.level, r)?, PatchClass::Normal)),
        (Some(_), None) => bail!(Data, "sample {} is labelled but has no landmark", s.id),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierLogEntry {
    pub step: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct ClassifierTraining {
    pub classifier: PatchClassifier,
    pub log: Vec<ClassifierLogEntry>,
    pub val_accuracy: f64,
    pub per_class_accuracy: [Option<f64>; 3],
}

/// Add one corrupted copy per real patch, as the implausible class.
pub fn with_implausible(real: &[LabeledPatch], seed: u64) -> Vec<LabeledPatch> {
    let mut r = rng::seeded(seed);
    let mut out = real.to_vec();
    let take = real.iter().filter(|l| l.class != PatchClass::Implausible).count() / 2;
    for l in real.iter().filter(|l| l.class != PatchClass::Implausible).take(take.max(1)) {
        out.push(LabeledPatch { patch: corrupt(&l.patch, &mut r), class: PatchClass::Implausible });
    }
    out
}

/// Train on real patches (normal and pathology), generating implausible
/// examples on the fly; fails with a calibration error when held-out
/// accuracy stays below `min_accuracy`.
pub fn train_classifier(train: &[LabeledPatch], val: &[LabeledPatch], pathology: Pathology, cfg: &ClassifierConfig) -> Result<ClassifierTraining> {
    cfg.validate()?;
    let real: Vec<&LabeledPatch> = train.iter().filter(|l| l.class != PatchClass::Implausible).collect();
    if real.is_empty() || val.is_empty() {
        bail!(Data, "classifier needs non-empty training and validation sets");
    }
    let val = with_implausible(val, rng::derive_seed(cfg.seed, 0x7a1));
    let mut clf = PatchClassifier::new(*cfg, pathology, cfg.seed)?;
    let mut opt = Adam::new(&clf.params, cfg.lr);
    let mut r = rng::stream(cfg.seed, 1);
    let mut log = Vec::new();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut running = (0.0, 0usize);
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        let mut labels = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let l = real[rng::below(&mut r, real.len())];
            if rng::below(&mut r, 3) == 0 {
                batch.push(corrupt(&l.patch, &mut r));
                labels.push(PatchClass::Implausible.index());
            } else {
                batch.push(if cfg.augment { augment(&l.patch, &mut r) } else { l.patch.clone() });
                labels.push(l.class.index());
            }
        }
        let refs: Vec<&Patch> = batch.iter().collect();
        let mut g = Graph::new(&clf.params);
        let x = g.input(clf.input(&refs)?);
        let (_, logits) = clf.graph(&mut g, x, refs.len());
        let loss = g.softmax_cross_entropy(logits, labels);
        let lv = g.value(loss).data[0];
        if !lv.is_finite() {
            bail!(TrainingFailure, "classifier loss became non-finite at step {}", step);
        }
        let mut grads = g.backward(loss);
        drop(g);
        clip_grad_norm(&mut grads, 1.0);
        opt.step(&mut clf.params, &grads);
        running = (running.0 + lv, running.1 + 1);
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let (acc, _) = clf.accuracy(&val)?;
            log.push(ClassifierLogEntry { step, train_loss: running.0 / running.1 as f64, val_accuracy: acc });
            running = (0.0, 0);
            if best.as_ref().is_none_or(|b| acc > b.0) {
                best = Some((acc, clf.params.clone()));
            }
        }
    }
    if let Some((_, p)) = best {
        clf.params = p;
    }
    let (val_accuracy, per_class_accuracy) = clf.accuracy(&val)?;
    if val_accuracy < cfg.min_accuracy {
        bail!(
            Calibration,
            "classifier held-out accuracy {:.3} is below {:.2} (per class {:?}); evaluation would be unreliable",
            val_accuracy,
            cfg.min_accuracy,
            per_class_accuracy
        );
    }
    Ok(ClassifierTraining { classifier: clf, log, val_accuracy, per_class_accuracy })
}

/// Fraction of patches the classifier assigns to the pathology class.
pub fn pathology_rate(patches: &[&Patch], clf: &PatchClassifier) -> Result<f64> {
    if patches.is_empty() {
        bail!(Data, "pathology rate of an empty set");
    }
    let hits = clf.predict(patches)?.iter().filter(|&&c| c == PatchClass::Pathology).count();
    Ok(hits as f64 / patches.len() as f64)
}

/// Fraction of patches whose normal-or-pathology probability is at least `threshold`.
pub fn in_distribution_rate(patches: &[&Patch], clf: &PatchClassifier, threshold: f64) -> Result<f64> {
    if patches.is_empty() {
        bail!(Data, "in-distribution rate of an empty set");
    }
    let hits = clf.probabilities(patches)?.iter().filter(|p| p[0] + p[1] >= threshold).count();
    Ok(hits as f64 / patches.len() as f64)
}

pub const IN_DISTRIBUTION_THRESHOLD: f64 = 0.9;

/// Generated patches for one condition cell, grouped by source input.
#[derive(Debug, Clone)]
pub struct CellOutputs {
    pub level: Level,
    pub severity: Severity,
    pub groups: Vec<Vec<Patch>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionCell {
    pub level: Level,
    pub pathology: Pathology,
    pub severity: Severity,
    /// Real test patches with this condition.
    pub support: usize,
    pub outputs: usize,
    pub fd: Option<f64>,
    pub ms_ssim: Option<f64>,
    pub pathology_rate: Option<f64>,
    pub in_distribution: Option<f64>,
}

/// Metrics for one cell: FD of outputs against real patches of the
/// condition, mean pairwise MS-SSIM within each input's generations, and
/// classifier rates.
pub fn evaluate_cell(out: &CellOutputs, real: &[&Patch], clf: &PatchClassifier) -> Result<ConditionCell> {
    let gen: Vec<&Patch> = out.groups.iter().flatten().collect();
    let mut cell = ConditionCell {
        level: out.level,
        pathology: out.severity.pathology(),
        severity: out.severity,
        support: real.len(),
        outputs: gen.len(),
        fd: None,
        ms_ssim: None,
        pathology_rate: None,
        in_distribution: None,
    };
    if gen.is_empty() {
        return Ok(cell);
    }
    let (gf, gp) = batched_run(clf, &gen)?;
    cell.pathology_rate = Some(gp.iter().filter(|p| argmax(p) == PatchClass::Pathology.index()).count() as f64 / gen.len() as f64);
    cell.in_distribution = Some(gp.iter().filter(|p| p[0] + p[1] >= IN_DISTRIBUTION_THRESHOLD).count() as f64 / gen.len() as f64);
    if !real.is_empty() {
        let (rf, _) = batched_run(clf, real)?;
        cell.fd = Some(frechet_distance(&gf, &rf)?);
    }
    let mut s = 0.0;
    let mut n = 0usize;
    for g in &out.groups {
        if let Some(v) = mean_pairwise_ms_ssim(g)? {
            s += v;
            n += 1;
        }
    }
    cell.ms_ssim = (n > 0).then(|| s / n as f64);
    Ok(cell)
}

fn batched_run(clf: &PatchClassifier, patches: &[&Patch]) -> Result<(Vec<Vec<f64>>, Vec<[f64; 3]>)> {
    let mut f = Vec::with_capacity(patches.len());
    let mut p = Vec::with_capacity(patches.len());
    for c in patches.chunks(256) {
        let (a, b) = clf.run(c)?;
        f.extend(a);
        p.extend(b);
    }
    Ok((f, p))
}

/// FD between the two halves (even/odd index) of a real set: a floor for
/// what finite-sample noise alone produces.
pub fn split_half_fd(real: &[&Patch], clf: &PatchClassifier) -> Result<Option<f64>> {
    if real.len() < 4 {
        return Ok(None);
    }
    let (f, _) = batched_run(clf, real)?;
    let a: Vec<Vec<f64>> = f.iter().step_by(2).cloned().collect();
    let b: Vec<Vec<f64>> = f.iter().skip(1).step_by(2).cloned().collect();
    Ok(Some(frechet_distance(&a, &b)?))
}

/// One method's cells, in report order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub cells: Vec<ConditionCell>,
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(String::new, |x| format!("{:.*}", digits, x))
}

fn lookup<'a>(m: &'a MethodReport, level: Level, sev: Severity) -> Option<&'a ConditionCell> {
    m.cells.iter().find(|c| c.level == level && c.severity == sev)
}

/// Rows are level x severity, columns are method x {FD, MS-SSIM}.
/// Unsupported cells are left blank.
pub fn render_table(pathology: Pathology, methods: &[MethodReport]) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<6} {:<14} {:>7}", "FSU", "Condition", "Support");
    for m in methods {
        let _ = write!(s, " {:>12} {:>12}", format!("{} FD", m.method), format!("{} MS-SSIM", m.method));
    }
    s.push('\n');
    for sev in pathology.severities() {
        for level in Level::ALL {
            let support = methods.iter().find_map(|m| lookup(m, level, sev)).map_or(0, |c| c.support);
            let _ = write!(s, "{:<6} {:<14} {:>7}", level.name(), sev.display_name(), support);
            for m in methods {
                let c = lookup(m, level, sev);
                let _ = write!(s, " {:>12} {:>12}", fmt_opt(c.and_then(|c| c.fd), 3), fmt_opt(c.and_then(|c| c.ms_ssim), 3));
            }
            s.push('\n');
        }
    }
    s
}

pub const CSV_HEADER: &str = "method,level,pathology,severity,support,outputs,fd,ms_ssim,pathology_rate,in_distribution";

pub fn render_csv(methods: &[MethodReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for m in methods {
        for c in &m.cells {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                m.method,
                c.level.name(),
                c.pathology.name(),
                c.severity.name(),
                c.support,
                c.outputs,
                fmt_opt(c.fd, 6),
                fmt_opt(c.ms_ssim, 6),
                fmt_opt(c.pathology_rate, 6),
                fmt_opt(c.in_distribution, 6)
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::VolumeGrid;

    fn wave(n: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        // (row, column) order matches the reference script.
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                v[i * n + j] = f(i as f64, j as f64);
            }
        }
        v
    }

    fn pa(n: usize) -> Vec<f64> {
        wave(n, |i, j| 0.5 + 0.3 * (0.3 * i).sin() * (0.2 * j).cos() + 0.1 * (0.05 * i * j / 7.0).sin())
    }

    #[test]
    fn ms_ssim_reference_values() {
        let a = pa(20);
        let inv: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
        let bump: Vec<f64> = pa(20)
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let (i, j) = ((k / 20) as f64, (k % 20) as f64);
                (v + 0.2 * (-((i - 8.0).powi(2) + (j - 11.0).powi(2)) / 8.0).exp()).clamp(0.0, 1.0)
            })
            .collect();
        let c = wave(180, |i, j| 0.5 + 0.4 * (0.11 * i + 0.07 * j).sin() * (0.05 * j).cos());
        let d = wave(180, |i, j| 0.5 + 0.35 * (0.11 * i + 0.07 * j + 0.4).sin() * (0.05 * j).cos() + 0.05 * (0.2 * i).cos());
        let v_inv = ms_ssim_2d(&a, &inv, 20, 20).unwrap();
        assert!(v_inv < 0.2 && v_inv.abs() < 1e-9, "{v_inv}");
        let v_bump = ms_ssim_2d(&a, &bump, 20, 20).unwrap();
        assert!((v_bump - 0.9170407142607951).abs() < 1e-6, "{v_bump}");
        let v_wave = ms_ssim_2d(&c, &d, 180, 180).unwrap();
        assert!((v_wave - 0.8720272246373164).abs() < 1e-6, "{v_wave}");
    }

    #[test]
    fn ms_ssim_identity_symmetry_and_errors() {
        let a = pa(20);
        let b: Vec<f64> = a.iter().map(|v| v * 0.8 + 0.05).collect();
        assert!((ms_ssim_2d(&a, &a, 20, 20).unwrap() - 1.0).abs() < 1e-9);
        let (x, y) = (ms_ssim_2d(&a, &b, 20, 20).unwrap(), ms_ssim_2d(&b, &a, 20, 20).unwrap());
        assert!((x - y).abs() < 1e-12 && (0.0..1.0).contains(&x));
        assert!(matches!(ms_ssim_2d(&a, &b[..399], 20, 20), Err(crate::Error::Shape(_))));
        assert!(matches!(ms_ssim_2d(&[0.0], &[0.0], 1, 1), Err(crate::Error::Size(_))));
    }

    #[test]
    fn frechet_closed_forms() {
        let m = |v: &[f64]| DMatrix::from_row_slice((v.len() as f64).sqrt() as usize, (v.len() as f64).sqrt() as usize, v);
        let a = GaussianStats::from_moments(vec![0.0], m(&[1.0])).unwrap();
        let b = GaussianStats::from_moments(vec![1.0], m(&[1.0])).unwrap();
        assert!((frechet_from_stats(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let (ma, sa) = ([0.0, 2.0, -1.0], [1.0, 4.0, 0.25]);
        let (mb, sb) = ([1.0, 0.5, -1.0], [9.0, 1.0, 0.25]);
        let diag = |s: [f64; 3]| DMatrix::from_diagonal(&DVector::from_row_slice(&s));
        let got = frechet_from_stats(&GaussianStats::from_moments(ma.to_vec(), diag(sa)).unwrap(), &GaussianStats::from_moments(mb.to_vec(), diag(sb)).unwrap()).unwrap();
        let want: f64 = (0..3).map(|i| (ma[i] - mb[i]).powi(2) + (sa[i].sqrt() - sb[i].sqrt()).powi(2)).sum();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn frechet_reference_and_properties() {
        let feats = |n: usize, off: f64, s: f64, t: f64| -> Vec<Vec<f64>> {
            (0..n)
                .map(|k| (0..3).map(|c| s * ((0.7 * k as f64 * (c as f64 + 1.0) + off).sin() + 0.1 * c as f64 * (0.3 * k as f64 + c as f64).cos()) + t).collect())
                .collect()
        };
        let a = feats(40, 0.0, 1.0, 0.0);
        let b = feats(30, 1.0, 1.5, 0.3);
        let ab = frechet_distance(&a, &b).unwrap();
        assert!((ab - 0.7087145954101701).abs() < 1e-8, "{ab}");
        assert!((ab - frechet_distance(&b, &a).unwrap()).abs() < 1e-10);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-8);
        assert!(matches!(frechet_distance(&[], &a), Err(crate::Error::Data(_))));
    }

    #[test]
    fn crop_geometry() {
        let g = VolumeGrid::new_2d([64, 64], [1.25, 1.25], [0.0, 0.0]).unwrap();
        let img = Volume::from_data(g, 1, (0..4096).map(|i| i as f64 / 4096.0).collect()).unwrap();
        let c = crop_landmark_patch(&img, [40.0, 40.0, 0.0], DEFAULT_PATCH_MM).unwrap();
        assert_eq!(c.shape, [20, 20, 1]);
        assert!(!c.padded);
        assert_eq!(c.data[10 + 20 * 10], img.data[g.index([32, 32, 0])]);
        let e = crop_landmark_patch(&img, [5.0, 40.0, 0.0], DEFAULT_PATCH_MM).unwrap();
        assert!(e.padded && e.padded_voxels == 6 * 20);
        assert!((0..20).all(|y| (0..6).all(|x| e.data[y * 20 + x] == 0.0)));
        assert!(matches!(crop_landmark_patch(&img, [-5.0, 40.0, 0.0], DEFAULT_PATCH_MM), Err(crate::Error::InvalidLandmark(_))));
    }

    #[test]
    fn classifier_smoke_and_determinism() {
        use crate::synthdata::{make_dataset, PathologyMix, PhantomSpec};
        let spec = PhantomSpec::default();
        let d = make_dataset(200, PathologyMix::new(Pathology::Dh), &spec, 3).unwrap();
        let tr = classifier_patches(&d, Split::Train, DEFAULT_PATCH_MM, 1).unwrap();
        let va = classifier_patches(&d, Split::Val, DEFAULT_PATCH_MM, 2).unwrap();
        let cfg = ClassifierConfig { steps: 60, eval_every: 30, min_accuracy: 0.0, ..Default::default() };
        let t = train_classifier(&tr, &va, Pathology::Dh, &cfg).unwrap();
        assert!(t.val_accuracy.is_finite());
        let p = &va[0].patch;
        let f1 = t.classifier.features(&[p]).unwrap();
        let f2 = t.classifier.features(&[p]).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1[0].len(), 16);
        let strict = ClassifierConfig { min_accuracy: 1.01, ..cfg };
        assert!(matches!(train_classifier(&tr, &va, Pathology::Dh, &strict), Err(crate::Error::Calibration(_))));
    }

    #[test]
    fn unsupported_cells_render_blank() {
        let cell = ConditionCell {
            level: Level::L4L5,
            pathology: Pathology::Dh,
            severity: Severity::ModLarge,
            support: 0,
            outputs: 0,
            fd: None,
            ms_ssim: None,
            pathology_rate: None,
            in_distribution: None,
        };
        let reps = [MethodReport { method: "Weighted".into(), cells: vec![cell] }];
        let t = render_table(Pathology::Dh, &reps);
        assert!(!t.contains("0.000"));
        let csv = render_csv(&reps);
        assert!(csv.lines().nth(1).unwrap().ends_with(",0,0,,,,"));
    }
}
