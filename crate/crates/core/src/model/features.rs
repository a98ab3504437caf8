use rayon::prelude::*;

use crate::config::ModelConfig;
use crate::geometry::{lrf_from_neighbors, sdv_from_neighbors, NeighborGrid, Point, PointCloud};

/// Per-point network inputs for one cloud.
#[derive(Clone, Debug)]
pub struct CloudFeatures {
    pub n: usize,
    pub grid: usize,
    /// `n · grid³` descriptor values, point-major; empty when the raw-coordinate encoder is used.
    pub sdv: Vec<f32>,
    /// False where the local frame was degenerate (zero descriptor).
    pub valid: Vec<bool>,
    pub xyz: Vec<Point>,
}

impl CloudFeatures {
    pub fn degenerate_count(&self) -> usize {
        self.valid.iter().filter(|v| !**v).count()
    }
}

/// Descriptors for every point. Points whose frame is degenerate get a zero grid.
pub fn cloud_features(pc: &PointCloud, cfg: &ModelConfig) -> CloudFeatures {
    let n = pc.len();
    if !cfg.use_lrf {
        return CloudFeatures {
            n,
            grid: cfg.grid,
            sdv: Vec::new(),
            valid: vec![true; n],
            xyz: pc.points.clone(),
        };
    }
    let g3 = cfg.grid.pow(3);
    let index = NeighborGrid::new(&pc.points, cfg.lrf_radius);
    let per_point: Vec<(Vec<f32>, bool)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let nb = index.within(pc.points[i], cfg.lrf_radius);
            match lrf_from_neighbors(&pc.points, i, &nb) {
                Ok(frame) => {
                    let d = sdv_from_neighbors(&pc.points, i, &nb, &frame, cfg.lrf_radius, cfg.grid);
                    (d.grid, true)
                }
                Err(e) => {
                    log::trace!("{e}; using a zero descriptor");
                    (vec![0.0; g3], false)
                }
            }
        })
        .collect();
    let mut sdv = Vec::with_capacity(n * g3);
    let mut valid = Vec::with_capacity(n);
    for (g, ok) in per_point {
        sdv.extend(g);
        valid.push(ok);
    }
    let feats = CloudFeatures {
        n,
        grid: cfg.grid,
        sdv,
        valid,
        xyz: pc.points.clone(),
    };
    if feats.degenerate_count() > 0 {
        log::debug!("{} of {n} points have degenerate local frames", feats.degenerate_count());
    }
    feats
}
