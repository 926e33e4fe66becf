//! Robot-centric height grids sampled from the terrain.

use serde::{Deserialize, Serialize};

use crate::terrain::{height_at, TerrainProfile};

/// Rectangular sampling window in the agent frame. The window is translated with the
/// agent and stays aligned with the track axis; cell centers sit on a regular lattice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub forward: (f64, f64),
    pub lateral: (f64, f64),
    pub resolution: f64,
}

impl GridSpec {
    /// 1.2 m x 0.7 m window used by the actor.
    pub const ACTOR: GridSpec = GridSpec { forward: (-0.35, 0.85), lateral: (-0.35, 0.35), resolution: 0.1 };
    /// Larger window for the critic, lattice-aligned with [`GridSpec::ACTOR`].
    pub const CRITIC: GridSpec = GridSpec { forward: (-0.35, 1.25), lateral: (-0.55, 0.55), resolution: 0.1 };

    pub fn rows(&self) -> usize {
        ((self.forward.1 - self.forward.0) / self.resolution).round() as usize
    }

    pub fn cols(&self) -> usize {
        ((self.lateral.1 - self.lateral.0) / self.resolution).round() as usize
    }

    pub fn cells(&self) -> usize {
        self.rows() * self.cols()
    }

    /// Agent-frame offset of the center of cell `(row, col)`.
    pub fn cell_offset(&self, row: usize, col: usize) -> (f64, f64) {
        (self.forward.0 + (row as f64 + 0.5) * self.resolution, self.lateral.0 + (col as f64 + 0.5) * self.resolution)
    }
}

/// Row-major height grid: `rows` along travel (row 0 nearest the rear), `cols` across.
#[derive(Debug, Clone, PartialEq)]
pub struct Heightmap {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Heightmap {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Heightmap { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn sample(profile: &TerrainProfile, grid: &GridSpec, x: f64, y: f64) -> Self {
        let (rows, cols) = (grid.rows(), grid.cols());
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let (dx, dy) = grid.cell_offset(r, c);
                data.push(height_at(profile, x + dx, y + dy));
            }
        }
        Heightmap { rows, cols, data }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.cols + col] = v;
    }
}
