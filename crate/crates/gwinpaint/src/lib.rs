//! Std companion to `gwinpaint-core`: pipelines, file formats, run
//! directories and the command-line interface.

pub mod commands;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod formats;
pub mod pipeline;

pub use error::{Error, Result};
