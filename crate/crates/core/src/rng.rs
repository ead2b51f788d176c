//! Seeded random streams.
//!
//! Every stochastic component takes an explicit generator; independent
//! streams are derived from a master seed with ChaCha's stream selector, so
//! per-item draws do not depend on iteration order.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use rand_distr::StandardNormal;

use crate::geometry::VolumeGrid;
use crate::volume::Volume;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for item `stream` under `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Mix two words into a new seed (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
pub fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn uniform(rng: &mut Rng) -> f64 {
    rng.gen::<f64>()
}

pub fn uniform_range(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

pub fn below(rng: &mut Rng, n: usize) -> usize {
    rng.gen_range(0..n)
}

pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

pub fn normal_volume(rng: &mut Rng, grid: VolumeGrid, channels: usize) -> Volume {
    Volume { grid, channels, data: normal_vec(rng, grid.len() * channels) }
}

pub fn shuffle<T>(rng: &mut Rng, items: &mut [T]) {
    items.shuffle(rng);
}
