//! Gaussian-weighted per-voxel noise scheduling for diffusion inpainting.
//!
//! The crate is `no_std` (with `alloc`) and performs no IO. File formats,
//! configuration and the command-line interface live in the companion
//! `gwinpaint` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod codec;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod nn;
pub mod rng;
pub mod sampling;
pub mod schedule;
pub mod synthdata;
pub mod training;
pub mod volume;

pub use error::{Category, Error, Result};
pub use geometry::{
    gaussian_weight_field, resample_weights, threshold_mask, BinaryMask, Landmark, Level, Pathology, Severity,
    VolumeGrid, WeightField, WeightSpec,
};
pub use schedule::{
    build_schedule, q_sample_weighted, voxel_timestep, voxel_timesteps, NoiseSchedule, ScheduleKind, ScheduleParams,
    TimestepField,
};
pub use volume::Volume;
