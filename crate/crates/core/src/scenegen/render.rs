use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GridSpec, ModalityKind, ModalitySpec, Observation, OccupancyGrid, Pose, Scene};
use crate::error::{Error, Result};

/// Renders what `modality` sees of `scene` from `pose`, in the ego frame.
pub fn render_observation(scene: &Scene, pose: &Pose, modality: &ModalitySpec, seed: u64) -> Result<Observation> {
    modality.validate()?;
    if pose.x.abs() > scene.world_extent || pose.y.abs() > scene.world_extent {
        return Err(Error::Invalid(format!("pose ({}, {}) outside the world", pose.x, pose.y)));
    }
    let grid = modality.grid;
    let n = grid.cells();
    let mut data = vec![0.0; n * n];
    match modality.kind {
        ModalityKind::SparseRay { ray_count } => {
            let reach = modality.range.unwrap_or(grid.extent * std::f64::consts::SQRT_2);
            let step = 0.25 / grid.resolution;
            let steps = (reach / step).ceil() as usize;
            for k in 0..ray_count {
                let theta = 2.0 * PI * k as f64 / ray_count as f64;
                let (s, c) = theta.sin_cos();
                for i in 1..=steps {
                    let d = (i as f64 * step).min(reach);
                    let (lx, ly) = (c * d, s * d);
                    let (wx, wy) = pose.to_world(lx, ly);
                    if scene.occupied(wx, wy) {
                        if let Some((r, col)) = grid.cell_of(lx, ly) {
                            data[r * n + col] = 1.0;
                        }
                        break;
                    }
                }
            }
        }
        ModalityKind::DenseBlur { blur_sigma } => {
            for r in 0..n {
                for col in 0..n {
                    let (lx, ly) = grid.cell_center(r, col);
                    let in_range = modality.range.is_none_or(|rr| lx.hypot(ly) <= rr);
                    let (wx, wy) = pose.to_world(lx, ly);
                    if in_range && scene.occupied(wx, wy) {
                        data[r * n + col] = 1.0;
                    }
                }
            }
            if blur_sigma > 0.0 {
                data = gaussian_blur(&data, n, blur_sigma);
            }
        }
    }
    if modality.dropout_rate > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in data.iter_mut() {
            if rng.random::<f64>() < modality.dropout_rate {
                *v = 0.0;
            }
        }
    }
    Ok(Observation { grid, data })
}

/// Separable normalised Gaussian blur with zero padding; `sigma` in cells.
fn gaussian_blur(src: &[f64], n: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let pass = |input: &[f64], horizontal: bool| {
        let mut out = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                let mut acc = 0.0;
                for (t, k) in kernel.iter().enumerate() {
                    let off = t as isize - radius;
                    let (rr, cc) = if horizontal { (r as isize, c as isize + off) } else { (r as isize + off, c as isize) };
                    if rr >= 0 && cc >= 0 && (rr as usize) < n && (cc as usize) < n {
                        acc += k * input[rr as usize * n + cc as usize];
                    }
                }
                out[r * n + c] = acc;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

/// Cell is 1 iff its centre lies inside some object, in `pose`'s frame.
pub fn occupancy_labels(scene: &Scene, pose: &Pose, grid: GridSpec) -> OccupancyGrid {
    let n = grid.cells();
    let mut cells = vec![0u8; n * n];
    for r in 0..n {
        for c in 0..n {
            let (lx, ly) = grid.cell_center(r, c);
            let (wx, wy) = pose.to_world(lx, ly);
            if scene.occupied(wx, wy) {
                cells[r * n + c] = 1;
            }
        }
    }
    OccupancyGrid { grid, cells }
}

/// Nearest-neighbour resampling map that brings a grid expressed in
/// `source`'s frame into `target`'s frame: entry `p` of the result is the
/// source-grid cell under target cell `p`, or `None` outside the source grid.
pub fn warp_map(target: &Pose, target_grid: GridSpec, source: &Pose, source_grid: GridSpec) -> Vec<Option<u32>> {
    let n = target_grid.cells();
    let m = source_grid.cells();
    let mut map = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let (lx, ly) = target_grid.cell_center(r, c);
            let (wx, wy) = target.to_world(lx, ly);
            let (sx, sy) = source.to_local(wx, wy);
            map.push(source_grid.cell_of(sx, sy).map(|(sr, sc)| (sr * m + sc) as u32));
        }
    }
    map
}
