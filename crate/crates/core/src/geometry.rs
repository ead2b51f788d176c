//! Physical coordinate systems, landmark weight fields and ROI masks.
//!
//! All distances are measured in millimetres between voxel centres, so
//! anisotropic spacing (thick slices) is honoured. A landmark is snapped to
//! the centre of its nearest voxel on whichever grid a field is evaluated on;
//! the field then peaks at exactly `1.0` on that voxel at every resolution.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Default Gaussian width of the landmark weight field, in millimetres.
pub const DEFAULT_SIGMA_MM: f64 = 16.0;
/// Default weight threshold used to derive the baseline ROI.
pub const DEFAULT_MASK_TAU: f64 = 0.1;

/// Voxel lattice with physical metadata. Axis order is `(x, y, z)`; a 2-D
/// grid has `shape[2] == 1`. Linear storage index is `(z * ny + y) * nx + x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeGrid {
    shape: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    ndim: usize,
}

impl VolumeGrid {
    pub fn new_2d(shape: [usize; 2], spacing: [f64; 2], origin: [f64; 2]) -> Result<Self> {
        Self::build(
            [shape[0], shape[1], 1],
            [spacing[0], spacing[1], 1.0],
            [origin[0], origin[1], 0.0],
            2,
        )
    }

    pub fn new_3d(shape: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        Self::build(shape, spacing, origin, 3)
    }

    fn build(shape: [usize; 3], spacing: [f64; 3], origin: [f64; 3], ndim: usize) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            bail!(InvalidParameter, "grid shape must be positive, got {:?}", shape);
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            bail!(InvalidParameter, "grid spacing must be positive, got {:?}", spacing);
        }
        if origin.iter().any(|o| !o.is_finite()) {
            bail!(InvalidParameter, "grid origin must be finite");
        }
        Ok(Self { shape, spacing, origin, ndim })
    }

    pub fn ndim(&self) -> usize {
        self.ndim
    }
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }
    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }
    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }
    pub fn len(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    pub fn nx(&self) -> usize {
        self.shape[0]
    }
    pub fn ny(&self) -> usize {
        self.shape[1]
    }
    pub fn nz(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn index(&self, ix: [usize; 3]) -> usize {
        (ix[2] * self.shape[1] + ix[1]) * self.shape[0] + ix[0]
    }

    #[inline]
    pub fn unravel(&self, i: usize) -> [usize; 3] {
        let nx = self.shape[0];
        let ny = self.shape[1];
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    /// Millimetre position of a voxel centre.
    #[inline]
    pub fn voxel_center(&self, ix: [usize; 3]) -> [f64; 3] {
        [
            self.origin[0] + ix[0] as f64 * self.spacing[0],
            self.origin[1] + ix[1] as f64 * self.spacing[1],
            self.origin[2] + ix[2] as f64 * self.spacing[2],
        ]
    }

    /// Continuous voxel coordinate of a millimetre position (inverse of
    /// [`voxel_center`](Self::voxel_center)).
    pub fn to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Physical extent `[lo, hi]` per axis, measured at voxel edges.
    pub fn extent(&self) -> [(f64, f64); 3] {
        let mut out = [(0.0, 0.0); 3];
        for a in 0..3 {
            let lo = self.origin[a] - 0.5 * self.spacing[a];
            out[a] = (lo, lo + self.shape[a] as f64 * self.spacing[a]);
        }
        out
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.extent()
            .iter()
            .zip(p.iter())
            .take(self.ndim)
            .all(|(&(lo, hi), &v)| v >= lo && v <= hi)
    }

    /// Index of the voxel whose centre is nearest to `p` (clamped to the grid).
    pub fn nearest_voxel(&self, p: [f64; 3]) -> [usize; 3] {
        let v = self.to_voxel(p);
        let mut out = [0usize; 3];
        for a in 0..3 {
            let r = libm::floor(v[a] + 0.5);
            out[a] = if r < 0.0 { 0 } else { (r as usize).min(self.shape[a] - 1) };
        }
        out
    }

    pub fn same_extent(&self, other: &VolumeGrid, tol: f64) -> bool {
        self.ndim == other.ndim
            && self
                .extent()
                .iter()
                .zip(other.extent().iter())
                .all(|(a, b)| libm::fabs(a.0 - b.0) <= tol && libm::fabs(a.1 - b.1) <= tol)
    }

    /// Coarser grid covering the same physical extent, with integer
    /// downsampling factors per axis.
    pub fn downsampled(&self, factor: [usize; 3]) -> Result<Self> {
        let mut shape = [0; 3];
        let mut spacing = [0.0; 3];
        let mut origin = [0.0; 3];
        for a in 0..3 {
            let f = factor[a];
            if f == 0 || self.shape[a] % f != 0 {
                bail!(
                    InvalidParameter,
                    "axis {} of length {} is not divisible by factor {}",
                    a,
                    self.shape[a],
                    f
                );
            }
            shape[a] = self.shape[a] / f;
            spacing[a] = self.spacing[a] * f as f64;
            origin[a] = self.origin[a] + 0.5 * (f as f64 - 1.0) * self.spacing[a];
        }
        Self::build(shape, spacing, origin, self.ndim)
    }
}

/// Functional spinal unit level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    #[serde(rename = "L1-2")]
    L1L2,
    #[serde(rename = "L2-3")]
    L2L3,
    #[serde(rename = "L3-4")]
    L3L4,
    #[serde(rename = "L4-5")]
    L4L5,
    #[serde(rename = "L5-S1")]
    L5S1,
}

impl Level {
    pub const ALL: [Level; 5] = [Level::L1L2, Level::L2L3, Level::L3L4, Level::L4L5, Level::L5S1];

    pub fn index(self) -> usize {
        self as usize
    }
    pub fn from_index(i: usize) -> Option<Level> {
        Self::ALL.get(i).copied()
    }
    pub fn name(self) -> &'static str {
        match self {
            Level::L1L2 => "L1-2",
            Level::L2L3 => "L2-3",
            Level::L3L4 => "L3-4",
            Level::L4L5 => "L4-5",
            Level::L5S1 => "L5-S1",
        }
    }
    pub fn parse(s: &str) -> Option<Level> {
        Self::ALL.iter().copied().find(|l| l.name() == s)
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pathology {
    /// Disc herniation.
    #[serde(rename = "DH")]
    Dh,
    /// Central canal stenosis.
    #[serde(rename = "CCS")]
    Ccs,
}

impl Pathology {
    pub const ALL: [Pathology; 2] = [Pathology::Dh, Pathology::Ccs];

    pub fn name(self) -> &'static str {
        match self {
            Pathology::Dh => "DH",
            Pathology::Ccs => "CCS",
        }
    }
    pub fn parse(s: &str) -> Option<Pathology> {
        match s {
            "DH" | "dh" => Some(Pathology::Dh),
            "CCS" | "ccs" => Some(Pathology::Ccs),
            _ => None,
        }
    }
    pub fn severities(self) -> [Severity; 2] {
        match self {
            Pathology::Dh => [Severity::Small, Severity::ModLarge],
            Pathology::Ccs => [Severity::Moderate, Severity::Severe],
        }
    }
}

impl fmt::Display for Pathology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Pathology grade. DH uses `Small`/`ModLarge`, CCS uses `Moderate`/`Severe`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Severity {
    #[serde(rename = "small")]
    Small,
    #[serde(rename = "mod_large")]
    ModLarge,
    #[serde(rename = "moderate")]
    Moderate,
    #[serde(rename = "severe")]
    Severe,
}

impl Severity {
    pub fn pathology(self) -> Pathology {
        match self {
            Severity::Small | Severity::ModLarge => Pathology::Dh,
            Severity::Moderate | Severity::Severe => Pathology::Ccs,
        }
    }
    /// 0 for the milder grade, 1 for the more pronounced one.
    pub fn rank(self) -> usize {
        match self {
            Severity::Small | Severity::Moderate => 0,
            Severity::ModLarge | Severity::Severe => 1,
        }
    }
    pub fn name(self) -> &'static str {
        match self {
            Severity::Small => "small",
            Severity::ModLarge => "mod_large",
            Severity::Moderate => "moderate",
            Severity::Severe => "severe",
        }
    }
    /// Label as used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Severity::Small => "Small DH",
            Severity::ModLarge => "Mod./Large DH",
            Severity::Moderate => "Moderate CCS",
            Severity::Severe => "Severe CCS",
        }
    }
    pub fn parse(s: &str) -> Option<Severity> {
        match s {
            "small" => Some(Severity::Small),
            "mod_large" => Some(Severity::ModLarge),
            "moderate" => Some(Severity::Moderate),
            "severe" => Some(Severity::Severe),
            _ => None,
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Annotated pathology location plus its conditioning labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub position_mm: [f64; 3],
    pub level: Level,
    pub pathology: Pathology,
    pub severity: Severity,
}

impl Landmark {
    pub fn new(position_mm: [f64; 3], level: Level, severity: Severity) -> Self {
        Self { position_mm, level, pathology: severity.pathology(), severity }
    }
}

/// Per-voxel Gaussian weights in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightField {
    pub grid: VolumeGrid,
    pub values: Vec<f64>,
}

impl WeightField {
    pub fn constant(grid: VolumeGrid, value: f64) -> Self {
        Self { grid, values: vec![value; grid.len()] }
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Binary region of interest.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub grid: VolumeGrid,
    pub values: Vec<bool>,
}

impl BinaryMask {
    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.values.iter().zip(other.values.iter()).all(|(&a, &b)| !a || b)
    }

    /// The mask viewed as a weight field (1 inside, 0 outside).
    pub fn to_weights(&self) -> WeightField {
        WeightField {
            grid: self.grid,
            values: self.values.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

fn check_sigma(sigma_mm: f64) -> Result<()> {
    if !(sigma_mm > 0.0) || !sigma_mm.is_finite() {
        bail!(InvalidParameter, "sigma must be positive, got {}", sigma_mm);
    }
    Ok(())
}

/// Peak-normalised Gaussian weight field centred on the landmark.
///
/// `W(v) = exp(-|c_v - mu|^2 / (2 sigma^2))` where `mu` is the centre of the
/// voxel nearest to the landmark.
pub fn gaussian_weight_field(grid: &VolumeGrid, landmark: &Landmark, sigma_mm: f64) -> Result<WeightField> {
    check_sigma(sigma_mm)?;
    if !grid.contains(landmark.position_mm) {
        bail!(
            InvalidLandmark,
            "landmark {:?} lies outside the grid extent {:?}",
            landmark.position_mm,
            grid.extent()
        );
    }
    let mu = grid.voxel_center(grid.nearest_voxel(landmark.position_mm));
    let inv = 1.0 / (2.0 * sigma_mm * sigma_mm);
    let mut values = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let c = grid.voxel_center(grid.unravel(i));
        let d2 = (c[0] - mu[0]) * (c[0] - mu[0])
            + (c[1] - mu[1]) * (c[1] - mu[1])
            + (c[2] - mu[2]) * (c[2] - mu[2]);
        values.push(libm::exp(-d2 * inv));
    }
    Ok(WeightField { grid: *grid, values })
}

/// `mask(v) = W(v) > tau` (strict).
pub fn threshold_mask(w: &WeightField, tau: f64) -> Result<BinaryMask> {
    if !(tau > 0.0 && tau < 1.0) {
        bail!(InvalidParameter, "threshold must lie in (0, 1), got {}", tau);
    }
    Ok(BinaryMask { grid: w.grid, values: w.values.iter().map(|&v| v > tau).collect() })
}

/// Parameters of a landmark weight field together with the grid they were
/// defined on, so the field can be evaluated on any grid of equal extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightSpec {
    pub landmark: Landmark,
    pub sigma_mm: f64,
    pub source_grid: VolumeGrid,
}

impl WeightSpec {
    pub fn new(landmark: Landmark, sigma_mm: f64, source_grid: VolumeGrid) -> Result<Self> {
        check_sigma(sigma_mm)?;
        if !source_grid.contains(landmark.position_mm) {
            bail!(InvalidLandmark, "landmark {:?} outside source grid", landmark.position_mm);
        }
        Ok(Self { landmark, sigma_mm, source_grid })
    }

    pub fn field(&self) -> Result<WeightField> {
        gaussian_weight_field(&self.source_grid, &self.landmark, self.sigma_mm)
    }
}

/// Evaluate the weight field analytically on `target`, which must cover the
/// same physical extent as the grid the landmark was defined on.
pub fn resample_weights(spec: &WeightSpec, target: &VolumeGrid) -> Result<WeightField> {
    if !spec.source_grid.same_extent(target, 1e-6) {
        bail!(
            ExtentMismatch,
            "source extent {:?} vs target extent {:?}",
            spec.source_grid.extent(),
            target.extent()
        );
    }
    gaussian_weight_field(target, &spec.landmark, spec.sigma_mm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lm(p: [f64; 3]) -> Landmark {
        Landmark::new(p, Level::L4L5, Severity::ModLarge)
    }

    fn grid_1mm(n: usize) -> VolumeGrid {
        VolumeGrid::new_2d([n, n], [1.0, 1.0], [0.0, 0.0]).unwrap()
    }

    #[test]
    fn closed_form_values_at_zero_sigma_two_sigma() {
        let g = grid_1mm(81);
        let w = gaussian_weight_field(&g, &lm([40.0, 40.0, 0.0]), 16.0).unwrap();
        assert_eq!(w.values[g.index([40, 40, 0])], 1.0);
        assert!((w.values[g.index([56, 40, 0])] - 0.606_530_659_712_633_4).abs() < 1e-12);
        assert!((w.values[g.index([40, 72, 0])] - 0.135_335_283_236_612_7).abs() < 1e-12);
    }

    #[test]
    fn landmark_outside_is_rejected() {
        let g = grid_1mm(10);
        let err = gaussian_weight_field(&g, &lm([20.0, 2.0, 0.0]), 16.0).unwrap_err();
        assert!(matches!(err, crate::Error::InvalidLandmark(_)));
        let err = gaussian_weight_field(&g, &lm([2.0, 2.0, 0.0]), 0.0).unwrap_err();
        assert!(matches!(err, crate::Error::InvalidParameter(_)));
    }

    #[test]
    fn mask_radius_matches_closed_form() {
        let g = grid_1mm(101);
        let w = gaussian_weight_field(&g, &lm([50.0, 50.0, 0.0]), 16.0).unwrap();
        let m = threshold_mask(&w, 0.1).unwrap();
        let r_max = (0..g.len())
            .filter(|&i| m.values[i])
            .map(|i| {
                let c = g.voxel_center(g.unravel(i));
                libm::sqrt((c[0] - 50.0).powi(2) + (c[1] - 50.0).powi(2))
            })
            .fold(0.0, f64::max);
        let expected = 16.0 * libm::sqrt(2.0 * libm::log(10.0));
        assert!((expected - 34.34).abs() < 0.01);
        assert!((r_max - expected).abs() <= 1.0, "r_max {} expected {}", r_max, expected);
    }

    #[test]
    fn threshold_rejects_bad_tau_and_zero_field_is_empty() {
        let g = grid_1mm(8);
        let w = WeightField::constant(g, 0.0);
        assert_eq!(threshold_mask(&w, 0.1).unwrap().count(), 0);
        assert!(threshold_mask(&w, 1.0).is_err());
        assert!(threshold_mask(&w, 0.0).is_err());
    }

    #[test]
    fn resample_identity_is_bit_exact() {
        let g = VolumeGrid::new_2d([128, 64], [0.625, 0.625], [0.0, 0.0]).unwrap();
        let spec = WeightSpec::new(lm([30.3, 17.1, 0.0]), 16.0, g).unwrap();
        assert_eq!(resample_weights(&spec, &g).unwrap(), spec.field().unwrap());
    }

    #[test]
    fn resample_downsampled_peak_and_brute_force() {
        let g = VolumeGrid::new_2d([128, 64], [0.625, 0.625], [0.0, 0.0]).unwrap();
        let coarse = g.downsampled([4, 4, 1]).unwrap();
        assert_eq!(coarse.shape(), [32, 16, 1]);
        let spec = WeightSpec::new(lm([61.1, 9.7, 0.0]), 16.0, g).unwrap();
        let w = resample_weights(&spec, &coarse).unwrap();
        let peak = coarse.index(coarse.nearest_voxel([61.1, 9.7, 0.0]));
        assert_eq!(w.values[peak], 1.0);
        assert_eq!(w.max(), 1.0);
        // Brute-force: find nearest coarse centre by exhaustive search.
        let mut best = (f64::INFINITY, [0.0; 3]);
        for i in 0..coarse.len() {
            let c = coarse.voxel_center(coarse.unravel(i));
            let d = (c[0] - 61.1).powi(2) + (c[1] - 9.7).powi(2);
            if d < best.0 {
                best = (d, c);
            }
        }
        for i in 0..coarse.len() {
            let c = coarse.voxel_center(coarse.unravel(i));
            let d2 = (c[0] - best.1[0]).powi(2) + (c[1] - best.1[1]).powi(2);
            let expect = (-d2 / 512.0).exp();
            assert!((w.values[i] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn resample_extent_mismatch() {
        let g = grid_1mm(16);
        let other = VolumeGrid::new_2d([4, 4], [4.0, 4.0], [1.5, 1.5]).unwrap();
        assert_eq!(other, g.downsampled([4, 4, 1]).unwrap());
        let spec = WeightSpec::new(lm([3.0, 3.0, 0.0]), 16.0, g).unwrap();
        assert!(resample_weights(&spec, &other).is_ok());
        let shifted = VolumeGrid::new_2d([4, 4], [4.0, 4.0], [2.5, 1.5]).unwrap();
        assert!(matches!(resample_weights(&spec, &shifted), Err(crate::Error::ExtentMismatch(_))));
    }

    #[test]
    fn isotropic_in_mm_under_anisotropic_spacing() {
        let g = VolumeGrid::new_3d([17, 17, 9], [1.0, 1.0, 4.0], [0.0, 0.0, 0.0]).unwrap();
        let w = gaussian_weight_field(&g, &lm([8.0, 8.0, 16.0]), 16.0).unwrap();
        // 8 mm along x vs 8 mm along z (2 slices).
        assert_eq!(w.values[g.index([16, 8, 4])], w.values[g.index([8, 8, 6])]);
    }

    proptest! {
        #[test]
        fn radial_monotonicity(px in 0.0f64..31.0, py in 0.0f64..31.0, sigma in 2.0f64..30.0) {
            let g = VolumeGrid::new_2d([32, 32], [1.0, 1.5], [0.0, 0.0]).unwrap();
            let w = gaussian_weight_field(&g, &lm([px, py * 1.5, 0.0]), sigma).unwrap();
            let mu = g.voxel_center(g.nearest_voxel([px, py * 1.5, 0.0]));
            let d = |i: usize| {
                let c = g.voxel_center(g.unravel(i));
                (c[0] - mu[0]).powi(2) + (c[1] - mu[1]).powi(2)
            };
            for i in (0..g.len()).step_by(7) {
                for j in (0..g.len()).step_by(11) {
                    if d(i) < d(j) && w.values[j] > 0.0 {
                        prop_assert!(w.values[i] > w.values[j]);
                    }
                }
                prop_assert!(w.values[i] >= 0.0 && w.values[i] <= 1.0);
            }
        }

        #[test]
        fn threshold_monotone_in_tau(t1 in 0.01f64..0.98, dt in 0.0f64..0.5) {
            let t2 = (t1 + dt).min(0.99);
            let g = grid_1mm(40);
            let w = gaussian_weight_field(&g, &lm([13.0, 22.0, 0.0]), 9.0).unwrap();
            let m1 = threshold_mask(&w, t1).unwrap();
            let m2 = threshold_mask(&w, t2).unwrap();
            prop_assert!(m2.is_subset_of(&m1));
            prop_assert!(m2.values[g.index([13, 22, 0])]);
        }
    }
}
