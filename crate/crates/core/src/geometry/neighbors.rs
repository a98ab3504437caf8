use std::collections::HashMap;

use super::cloud::{dist2, Point, PointCloud};
use crate::error::{Error, Result};

/// Uniform-grid bucket index over a fixed point set.
pub struct NeighborGrid<'a> {
    points: &'a [Point],
    cell: f32,
    lo: [i32; 3],
    hi: [i32; 3],
    cells: HashMap<[i32; 3], Vec<usize>>,
}

impl<'a> NeighborGrid<'a> {
    /// `cell` is the bucket edge; queries are cheapest when it is near the query radius.
    pub fn new(points: &'a [Point], cell: f32) -> Self {
        let cell = if cell.is_finite() && cell > 0.0 { cell } else { 1.0 };
        let mut cells: HashMap<[i32; 3], Vec<usize>> = HashMap::new();
        let mut lo = [i32::MAX; 3];
        let mut hi = [i32::MIN; 3];
        for (i, p) in points.iter().enumerate() {
            let k = key(*p, cell);
            for a in 0..3 {
                lo[a] = lo[a].min(k[a]);
                hi[a] = hi[a].max(k[a]);
            }
            cells.entry(k).or_default().push(i);
        }
        NeighborGrid {
            points,
            cell,
            lo,
            hi,
            cells,
        }
    }

    /// Indices with `‖p − q‖ ≤ r`, ascending.
    pub fn within(&self, q: Point, r: f32) -> Vec<usize> {
        let mut out = Vec::new();
        if self.points.is_empty() {
            return out;
        }
        let r2 = r * r;
        let span = (r / self.cell).ceil() as i32;
        let c = key(q, self.cell);
        let range = |a: usize| {
            let from = c[a].saturating_sub(span).max(self.lo[a]);
            let to = c[a].saturating_add(span).min(self.hi[a]);
            from..=to
        };
        for x in range(0) {
            for y in range(1) {
                for z in range(2) {
                    if let Some(bucket) = self.cells.get(&[x, y, z]) {
                        out.extend(bucket.iter().copied().filter(|&i| dist2(self.points[i], q) <= r2));
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

fn key(p: Point, cell: f32) -> [i32; 3] {
    p.map(|c| (c / cell).floor().clamp(i32::MIN as f32 / 2.0, i32::MAX as f32 / 2.0) as i32)
}

/// All points within distance `r` of `center`, including it, ascending.
pub fn radius_neighbors(pc: &PointCloud, center: usize, r: f32) -> Result<Vec<usize>> {
    if !(r > 0.0) {
        return Err(Error::Geometry(format!("neighborhood radius must be positive, got {r}")));
    }
    let q = *pc
        .points
        .get(center)
        .ok_or_else(|| Error::Geometry(format!("center index {center} out of range {}", pc.len())))?;
    let r2 = r * r;
    Ok((0..pc.len()).filter(|&i| dist2(pc.points[i], q) <= r2).collect())
}

/// Indices of the `k` nearest other points of every point (ties to the lower index).
pub fn knn_all(points: &[Point], k: usize) -> Vec<Vec<usize>> {
    let n = points.len();
    let k = k.min(n.saturating_sub(1));
    (0..n)
        .map(|i| {
            let mut d: Vec<(f32, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (dist2(points[i], points[j]), j))
                .collect();
            if k < d.len() {
                d.select_nth_unstable_by(k, |a, b| a.partial_cmp(b).expect("finite distances"));
                d.truncate(k);
            }
            d.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            d.into_iter().map(|(_, j)| j).collect()
        })
        .collect()
}
