use super::cloud::{Point, PointCloud};
use super::lrf::LocalReferenceFrame;
use super::neighbors::radius_neighbors;
use crate::error::Result;

pub const DEFAULT_GRID: usize = 16;
/// Gaussian width in voxel edges.
pub const SIGMA_VOXELS: f64 = 0.75;
/// Kernel support in standard deviations.
pub const TRUNCATE_SIGMAS: f64 = 3.0;

/// Smoothed density grid in a point's frame, indexed `(x * size + y) * size + z`.
#[derive(Clone, Debug, PartialEq)]
pub struct SdvDescriptor {
    pub grid: Vec<f32>,
    pub size: usize,
    pub center: usize,
}

impl SdvDescriptor {
    pub fn zeros(size: usize, center: usize) -> Self {
        SdvDescriptor {
            grid: vec![0.0; size * size * size],
            size,
            center,
        }
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.grid[(x * self.size + y) * self.size + z]
    }
}

/// Descriptor on the default grid over the radius-`r` neighborhood.
pub fn compute_sdv(pc: &PointCloud, center: usize, lrf: &LocalReferenceFrame, r: f32) -> Result<SdvDescriptor> {
    let nb = radius_neighbors(pc, center, r)?;
    Ok(sdv_from_neighbors(&pc.points, center, &nb, lrf, r, DEFAULT_GRID))
}

/// Splats each neighbor, in frame coordinates, into a `size³` grid spanning
/// `[−r, r]³`, then scales the grid so its maximum is 1.
pub fn sdv_from_neighbors(
    points: &[Point],
    center: usize,
    nb: &[usize],
    lrf: &LocalReferenceFrame,
    r: f32,
    size: usize,
) -> SdvDescriptor {
    let mut out = SdvDescriptor::zeros(size, center);
    let r = f64::from(r);
    let voxel = 2.0 * r / size as f64;
    let sigma = SIGMA_VOXELS * voxel;
    let cut = TRUNCATE_SIGMAS * sigma;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let span = (cut / voxel).ceil() as i64 + 1;
    let mut w = [Vec::new(), Vec::new(), Vec::new()];
    for &i in nb {
        let q = lrf.to_local(points[i]);
        let mut lo = [0usize; 3];
        for a in 0..3 {
            // Fractional voxel coordinate: voxel k is centered at −r + (k + ½)·voxel.
            let u = (q[a] + r) / voxel - 0.5;
            let k0 = (u.round() as i64 - span).max(0);
            let k1 = (u.round() as i64 + span).min(size as i64 - 1);
            w[a].clear();
            lo[a] = k0.max(0) as usize;
            for k in k0..=k1 {
                let d = (k as f64 - u) * voxel;
                w[a].push(d * d);
            }
        }
        for (ix, dx) in w[0].iter().enumerate() {
            for (iy, dy) in w[1].iter().enumerate() {
                let dxy = dx + dy;
                if dxy > cut * cut {
                    continue;
                }
                let row = ((lo[0] + ix) * size + lo[1] + iy) * size + lo[2];
                for (iz, dz) in w[2].iter().enumerate() {
                    let d2 = dxy + dz;
                    if d2 <= cut * cut {
                        out.grid[row + iz] += (-d2 * inv).exp() as f32;
                    }
                }
            }
        }
    }
    let max = out.grid.iter().copied().fold(0.0f32, f32::max);
    if max > 0.0 {
        for g in &mut out.grid {
            *g /= max;
        }
    }
    out
}
