use crate::error::{Error, Result};

pub type Point = [f32; 3];

/// Mirror plane `normal · x = offset`, with a unit normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SymmetryPlane {
    pub normal: [f64; 3],
    pub offset: f64,
}

impl SymmetryPlane {
    pub fn new(normal: [f64; 3], offset: f64) -> Result<Self> {
        let n = (normal[0].powi(2) + normal[1].powi(2) + normal[2].powi(2)).sqrt();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::Geometry("symmetry plane normal must be non-zero".into()));
        }
        Ok(SymmetryPlane {
            normal: normal.map(|c| c / n),
            offset: offset / n,
        })
    }

    /// The plane `x = 0`.
    pub fn yz() -> Self {
        SymmetryPlane {
            normal: [1.0, 0.0, 0.0],
            offset: 0.0,
        }
    }

    pub fn reflect(&self, p: Point) -> Point {
        let p64 = p.map(f64::from);
        let s = dot(self.normal, p64) - self.offset;
        [0, 1, 2].map(|i| (p64[i] - 2.0 * s * self.normal[i]) as f32)
    }
}

/// A point set with optional annotations, all aligned to `points`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub part_labels: Option<Vec<i32>>,
    pub gt_keypoints: Option<Vec<usize>>,
    pub correspondence_ids: Option<Vec<i32>>,
    pub symmetry_plane: Option<SymmetryPlane>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        PointCloud {
            points,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks the structural invariants: non-empty, finite, annotations aligned and in range.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::Geometry("point cloud is empty".into()));
        }
        if self.points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Geometry("point cloud has non-finite coordinates".into()));
        }
        if self.part_labels.as_ref().is_some_and(|l| l.len() != n) {
            return Err(Error::Geometry("part labels are not aligned with points".into()));
        }
        if self.correspondence_ids.as_ref().is_some_and(|l| l.len() != n) {
            return Err(Error::Geometry("correspondence ids are not aligned with points".into()));
        }
        if let Some(&k) = self.gt_keypoints.iter().flatten().find(|&&k| k >= n) {
            return Err(Error::Geometry(format!("keypoint index {k} out of range {n}")));
        }
        Ok(())
    }

    /// Subset of points (and aligned annotations); keypoints are dropped.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            part_labels: self.part_labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            gt_keypoints: None,
            correspondence_ids: self
                .correspondence_ids
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            symmetry_plane: self.symmetry_plane,
        }
    }

    /// Applies `p -> R p` to every point (and the symmetry plane).
    pub fn rotated(&self, r: &[[f64; 3]; 3]) -> PointCloud {
        let mut out = self.clone();
        for p in &mut out.points {
            *p = apply(r, *p);
        }
        if let Some(pl) = &mut out.symmetry_plane {
            pl.normal = matvec(r, pl.normal);
        }
        out
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.points {
            for i in 0..3 {
                c[i] += f64::from(p[i]);
            }
        }
        c.map(|v| v / self.len().max(1) as f64)
    }
}

/// Centers on the centroid and scales so the centroid-centered bounding
/// sphere has radius 1 (diameter 2).
pub fn normalize_cloud(pc: &PointCloud) -> Result<PointCloud> {
    if pc.len() < 2 {
        return Err(Error::Geometry("normalization needs at least two points".into()));
    }
    pc.validate()?;
    let c = pc.centroid();
    let radius = pc
        .points
        .iter()
        .map(|p| dist64(p.map(f64::from), c))
        .fold(0.0, f64::max);
    if radius <= f64::EPSILON {
        return Err(Error::Geometry("all points coincide".into()));
    }
    let s = 1.0 / radius;
    let mut out = pc.clone();
    for p in &mut out.points {
        *p = [0, 1, 2].map(|i| ((f64::from(p[i]) - c[i]) * s) as f32);
    }
    if let Some(pl) = &mut out.symmetry_plane {
        pl.offset = s * (pl.offset - dot(pl.normal, c));
    }
    Ok(out)
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn dist64(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[inline]
pub fn dist2(a: Point, b: Point) -> f32 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

pub(crate) fn matvec(r: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [dot(r[0], v), dot(r[1], v), dot(r[2], v)]
}

pub fn apply(r: &[[f64; 3]; 3], p: Point) -> Point {
    matvec(r, p.map(f64::from)).map(|v| v as f32)
}
