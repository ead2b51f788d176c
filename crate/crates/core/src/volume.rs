use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::geometry::VolumeGrid;

/// Multi-channel scalar volume. Layout is `[channel][z][y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub grid: VolumeGrid,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn zeros(grid: VolumeGrid, channels: usize) -> Self {
        Self { grid, channels, data: vec![0.0; grid.len() * channels] }
    }

    pub fn from_data(grid: VolumeGrid, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() * channels {
            bail!(
                Shape,
                "volume data has {} values, grid {:?} x {} channels needs {}",
                data.len(),
                grid.shape(),
                channels,
                grid.len() * channels
            );
        }
        Ok(Self { grid, channels, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.grid.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.grid.len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_layout(&self, other: &Volume) -> bool {
        self.grid == other.grid && self.channels == other.channels
    }

    pub fn expect_layout(&self, grid: &VolumeGrid, channels: usize, what: &str) -> Result<()> {
        if self.grid != *grid || self.channels != channels {
            bail!(
                Shape,
                "{}: expected {:?} x {} channels, got {:?} x {}",
                what,
                grid.shape(),
                channels,
                self.grid.shape(),
                self.channels
            );
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
