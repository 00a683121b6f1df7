//! Synthetic bird's-eye-view scenes, per-modality observations and labels.
//!
//! All grids are row-major and expressed in an ego frame: for a grid of
//! `size` cells covering `[-extent, extent]` metres on both axes, cell
//! `(row, col)` has its centre at `x = -extent + (col + 0.5) / res`,
//! `y = -extent + (row + 0.5) / res`.

pub(crate) mod dataset;
mod render;
mod scene;

pub use dataset::{DatasetSpec, Sample};
pub use render::{occupancy_labels, render_observation, warp_map};
pub use scene::{apply_pose_noise, generate_scene, sample_poses, Object, Pose, Scene};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square ego-frame grid geometry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Half-width of the covered square, metres.
    pub extent: f64,
    /// Cells per metre.
    pub resolution: f64,
}

impl GridSpec {
    pub fn new(extent: f64, resolution: f64) -> Result<Self> {
        if !(extent > 0.0 && resolution > 0.0) {
            return Err(Error::Invalid(format!("grid needs positive extent and resolution, got {extent}, {resolution}")));
        }
        let cells = 2.0 * extent * resolution;
        if (cells - cells.round()).abs() > 1e-9 {
            return Err(Error::Invalid(format!("grid of extent {extent} at {resolution}/m has fractional size")));
        }
        Ok(Self { extent, resolution })
    }

    /// Grid covering `[-extent, extent]` with `cells` cells per side.
    pub fn with_cells(extent: f64, cells: usize) -> Self {
        Self { extent, resolution: cells as f64 / (2.0 * extent) }
    }

    pub fn cells(&self) -> usize {
        (2.0 * self.extent * self.resolution).round() as usize
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let x = -self.extent + (col as f64 + 0.5) / self.resolution;
        let y = -self.extent + (row as f64 + 0.5) / self.resolution;
        (x, y)
    }

    /// Cell containing ego-frame point `(x, y)`, if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x + self.extent) * self.resolution).floor();
        let r = ((y + self.extent) * self.resolution).floor();
        let n = self.cells() as f64;
        (c >= 0.0 && r >= 0.0 && c < n && r < n).then_some((r as usize, c as usize))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModalityKind {
    /// Ray-cast hit mask from the ego origin; only the first surface each
    /// ray meets is visible.
    SparseRay { ray_count: usize },
    /// Occupancy silhouette blurred by a Gaussian of `blur_sigma` cells.
    DenseBlur { blur_sigma: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ModalityKind,
    pub dropout_rate: f64,
    /// Observation grid (extent and cells per metre).
    pub grid: GridSpec,
    /// Sensing radius in metres; `None` sees the whole grid.
    pub range: Option<f64>,
}

impl ModalitySpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return Err(Error::Invalid(format!("{}: dropout_rate {} outside [0, 1]", self.name, self.dropout_rate)));
        }
        match self.kind {
            ModalityKind::SparseRay { ray_count } if ray_count < 8 => {
                Err(Error::Invalid(format!("{}: sparse-ray needs at least 8 rays, got {ray_count}", self.name)))
            }
            ModalityKind::DenseBlur { blur_sigma } if !(blur_sigma >= 0.0) => {
                Err(Error::Invalid(format!("{}: blur_sigma must be >= 0", self.name)))
            }
            _ => match self.range {
                Some(r) if !(r > 0.0) => Err(Error::Invalid(format!("{}: range must be positive", self.name))),
                _ => Ok(()),
            },
        }
    }
}

/// Binary ego-frame occupancy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupancyGrid {
    pub grid: GridSpec,
    /// Row-major `cells x cells`, entries 0 or 1.
    pub cells: Vec<u8>,
}

impl OccupancyGrid {
    pub fn size(&self) -> usize {
        self.grid.cells()
    }

    pub fn count(&self) -> usize {
        self.cells.iter().map(|&c| c as usize).sum()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.cells.iter().map(|&c| c as f64).collect()
    }
}

/// Real-valued ego-frame observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub grid: GridSpec,
    pub data: Vec<f64>,
}

impl Observation {
    pub fn nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }
}
