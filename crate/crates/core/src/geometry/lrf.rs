use nalgebra::{Matrix3, SymmetricEigen};

use super::cloud::{dot, Point, PointCloud};
use super::neighbors::radius_neighbors;
use crate::error::{Error, Result};

/// Minimum ratio between consecutive covariance eigenvalues.
pub const EIGEN_RATIO_MIN: f64 = 1.02;

/// Orthonormal, right-handed frame; `rotation[r][c]` with columns the x, y, z axes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalReferenceFrame {
    pub rotation: [[f64; 3]; 3],
    pub origin: [f64; 3],
}

impl LocalReferenceFrame {
    pub fn identity(origin: [f64; 3]) -> Self {
        LocalReferenceFrame {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            origin,
        }
    }

    pub fn from_axes(x: [f64; 3], y: [f64; 3], z: [f64; 3], origin: [f64; 3]) -> Self {
        LocalReferenceFrame {
            rotation: [[x[0], y[0], z[0]], [x[1], y[1], z[1]], [x[2], y[2], z[2]]],
            origin,
        }
    }

    pub fn axis(&self, k: usize) -> [f64; 3] {
        [self.rotation[0][k], self.rotation[1][k], self.rotation[2][k]]
    }

    /// Coordinates of `p` in this frame: `Rᵀ (p − origin)`.
    pub fn to_local(&self, p: Point) -> [f64; 3] {
        let d = [0, 1, 2].map(|i| f64::from(p[i]) - self.origin[i]);
        [0, 1, 2].map(|k| dot(self.axis(k), d))
    }
}

/// Frame of `center` from the neighborhood of radius `r`.
pub fn estimate_lrf(pc: &PointCloud, center: usize, r: f32) -> Result<LocalReferenceFrame> {
    let nb = radius_neighbors(pc, center, r)?;
    lrf_from_neighbors(&pc.points, center, &nb)
}

/// Eigen-frame of the unweighted neighborhood covariance: x along the largest
/// eigenvalue, z along the smallest. Each of z and x points toward the side
/// holding more neighbors (relative to the center point); a count tie falls
/// back to the sign of the summed projections. y = z × x.
pub fn lrf_from_neighbors(points: &[Point], center: usize, nb: &[usize]) -> Result<LocalReferenceFrame> {
    let degenerate = |reason: String| Error::DegenerateLrf {
        index: center,
        reason,
    };
    if nb.len() < 4 {
        return Err(degenerate(format!("{} neighbors, need at least 4", nb.len())));
    }
    let origin = points[center].map(f64::from);
    let n = nb.len() as f64;
    let mut mean = [0.0f64; 3];
    for &i in nb {
        for a in 0..3 {
            mean[a] += f64::from(points[i][a]);
        }
    }
    let mean = mean.map(|m| m / n);
    let mut cov = Matrix3::<f64>::zeros();
    for &i in nb {
        let d = [0, 1, 2].map(|a| f64::from(points[i][a]) - mean[a]);
        for a in 0..3 {
            for b in 0..3 {
                cov[(a, b)] += d[a] * d[b];
            }
        }
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lam = order.map(|k| eig.eigenvalues[k].max(0.0));
    if !(lam[0] > 0.0) || lam[1] <= 1e-9 * lam[0] {
        return Err(degenerate("rank-deficient covariance".into()));
    }
    if lam[0] < EIGEN_RATIO_MIN * lam[1] || lam[1] < EIGEN_RATIO_MIN * lam[2] {
        return Err(degenerate(format!(
            "eigenvalues {:.3e}, {:.3e}, {:.3e} too close",
            lam[0], lam[1], lam[2]
        )));
    }
    let col = |k: usize| {
        let c = eig.eigenvectors.column(order[k]);
        let v = [c[0], c[1], c[2]];
        let norm = dot(v, v).sqrt();
        v.map(|x| x / norm)
    };
    let rels: Vec<[f64; 3]> = nb
        .iter()
        .map(|&i| [0, 1, 2].map(|a| f64::from(points[i][a]) - origin[a]))
        .collect();
    let scale = rels.iter().map(|d| dot(*d, *d).sqrt()).fold(0.0, f64::max);
    let tol = 1e-6 * scale;
    let orient = |v: [f64; 3]| {
        let (mut pos, mut neg, mut sum) = (0usize, 0usize, 0.0f64);
        for d in &rels {
            let p = dot(*d, v);
            sum += p;
            if p > tol {
                pos += 1;
            } else if p < -tol {
                neg += 1;
            }
        }
        if neg > pos || (neg == pos && sum < 0.0) {
            v.map(|x| -x)
        } else {
            v
        }
    };
    let z = orient(col(2));
    let x = orient(col(0));
    let y = cross(z, x);
    Ok(LocalReferenceFrame::from_axes(x, y, z, origin))
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planar_patch_normal_is_z() {
        let mut pts = Vec::new();
        for i in 0..9 {
            for j in 0..5 {
                pts.push([i as f32 * 0.02 - 0.08, j as f32 * 0.03 - 0.06, 0.0]);
            }
        }
        let pc = PointCloud::new(pts);
        let f = estimate_lrf(&pc, 22, 0.5).unwrap();
        let z = f.axis(2);
        assert!((z[2].abs() - 1.0).abs() < 1e-3);
        let det = dot(cross(f.axis(0), f.axis(1)), f.axis(2));
        assert!((det - 1.0).abs() < 1e-9);
    }

    #[test]
    fn too_few_or_collinear_points_are_degenerate() {
        let pc = PointCloud::new(vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.2, 0.0, 0.0]]);
        assert!(matches!(estimate_lrf(&pc, 0, 1.0), Err(Error::DegenerateLrf { index: 0, .. })));
        let pc = PointCloud::new((0..10).map(|i| [i as f32 * 0.01, 0.0, 0.0]).collect());
        assert!(matches!(estimate_lrf(&pc, 3, 1.0), Err(Error::DegenerateLrf { .. })));
    }
}
