use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::cloud::{dist2, Point, PointCloud, SymmetryPlane};
use super::neighbors::{knn_all, NeighborGrid};
use crate::error::{Error, Result};

/// Neighbors per node in the geodesic graph.
pub const GEODESIC_K: usize = 10;

/// Mean squared nearest-neighbor distance in both directions.
pub fn chamfer_distance(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Geometry("Chamfer distance of an empty point set".into()));
    }
    let one_way = |from: &[Point], to: &[Point]| {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| sq64(*p, *q))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / from.len() as f64
    };
    Ok(one_way(a, b) + one_way(b, a))
}

fn sq64(a: Point, b: Point) -> f64 {
    (0..3).map(|i| (f64::from(a[i]) - f64::from(b[i])).powi(2)).sum()
}

/// Symmetrized kNN graph with Euclidean edge weights.
pub struct GeodesicGraph {
    adj: Vec<Vec<(usize, f64)>>,
}

impl GeodesicGraph {
    pub fn new(points: &[Point], k: usize) -> Self {
        let knn = knn_all(points, k);
        let mut sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); points.len()];
        for (i, nn) in knn.iter().enumerate() {
            for &j in nn {
                sets[i].insert(j);
                sets[j].insert(i);
            }
        }
        let adj = sets
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.into_iter().map(|j| (j, sq64(points[i], points[j]).sqrt())).collect())
            .collect();
        GeodesicGraph { adj }
    }

    pub fn len(&self) -> usize {
        self.adj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adj.is_empty()
    }

    /// Shortest-path lengths from `source`; unreachable nodes are infinite.
    pub fn distances(&self, source: usize) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; self.adj.len()];
        if source >= dist.len() {
            return dist;
        }
        dist[source] = 0.0;
        let mut heap = BinaryHeap::new();
        heap.push(State(0.0, source));
        while let Some(State(d, u)) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for &(v, w) in &self.adj[u] {
                let nd = d + w;
                if nd < dist[v] {
                    dist[v] = nd;
                    heap.push(State(nd, v));
                }
            }
        }
        dist
    }
}

#[derive(PartialEq)]
struct State(f64, usize);

impl Eq for State {}

impl Ord for State {
    fn cmp(&self, o: &Self) -> Ordering {
        o.0.total_cmp(&self.0).then_with(|| o.1.cmp(&self.1))
    }
}

impl PartialOrd for State {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

/// Graph geodesics from `source` over the `k`-nearest-neighbor graph.
pub fn geodesic_distances(pc: &PointCloud, source: usize, k: usize) -> Vec<f64> {
    GeodesicGraph::new(&pc.points, k).distances(source)
}

/// Greedy non-maximum suppression. Candidates are visited by descending
/// score, then descending `tiebreak` (when given), then ascending index.
pub fn nms(points: &[Point], scores: &[f32], radius: f32, threshold: f32) -> Vec<usize> {
    nms_with_tiebreak(points, scores, None, radius, threshold, None)
}

pub fn nms_with_tiebreak(
    points: &[Point],
    scores: &[f32],
    tiebreak: Option<&[f32]>,
    radius: f32,
    threshold: f32,
    eligible: Option<&[bool]>,
) -> Vec<usize> {
    let n = points.len().min(scores.len());
    let mut order: Vec<usize> = (0..n)
        .filter(|&i| scores[i] >= threshold && eligible.is_none_or(|e| e[i]))
        .collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| match tiebreak {
                Some(t) => t[b].total_cmp(&t[a]),
                None => Ordering::Equal,
            })
            .then(a.cmp(&b))
    });
    let grid = NeighborGrid::new(&points[..n], radius.max(1e-6));
    let mut suppressed = vec![false; n];
    let mut keep = Vec::new();
    for i in order {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for j in grid.within(points[i], radius) {
            suppressed[j] = true;
        }
    }
    keep
}

/// Mirror pairs `(i, j)`, `i < j`, whose reflections match within `tol`.
pub fn symmetric_pairs(pc: &PointCloud, plane: &SymmetryPlane, tol: f32) -> Vec<(usize, usize)> {
    let pts = &pc.points;
    let grid = NeighborGrid::new(pts, tol.max(1e-6));
    let mut pairs = BTreeSet::new();
    for (i, &p) in pts.iter().enumerate() {
        let m = plane.reflect(p);
        let best = grid
            .within(m, tol)
            .into_iter()
            .min_by(|&a, &b| dist2(pts[a], m).total_cmp(&dist2(pts[b], m)).then(a.cmp(&b)));
        if let Some(j) = best {
            if j != i {
                pairs.insert((i.min(j), i.max(j)));
            }
        }
    }
    pairs.into_iter().collect()
}

/// Uniform proper rotation from a normalized Gaussian quaternion.
pub fn random_rotation(seed: u64) -> [[f64; 3]; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rotation_from_rng(&mut rng)
}

pub fn rotation_from_rng<R: Rng>(rng: &mut R) -> [[f64; 3]; 3] {
    let q = loop {
        let q: [f64; 4] = [0; 4].map(|_| rng.sample(StandardNormal));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-9 {
            break q.map(|v| v / n);
        }
    };
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chamfer_analytic() {
        let a = [[0.0, 0.0, 0.0]];
        let b = [[1.0, 0.0, 0.0]];
        assert_eq!(chamfer_distance(&a, &b).unwrap(), 2.0);
        assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
        assert!(chamfer_distance(&a, &[]).is_err());
    }

    #[test]
    fn geodesic_path_graph() {
        let pc = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        assert_eq!(geodesic_distances(&pc, 0, 1), vec![0.0, 1.0, 2.0]);
        let far = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [10.0, 0.0, 0.0], [11.0, 0.0, 0.0]]);
        let d = geodesic_distances(&far, 0, 1);
        assert!(d[2].is_infinite() && d[1] == 1.0);
    }

    #[test]
    fn nms_suppression_and_threshold() {
        let p = [[0.0, 0.0, 0.0], [0.05, 0.0, 0.0]];
        assert_eq!(nms(&p, &[0.9, 0.8], 0.1, 0.0), vec![0]);
        assert!(nms(&p, &[0.1, 0.2], 0.1, 0.5).is_empty());
        assert_eq!(nms(&p, &[0.5, 0.5], 0.1, 0.0), vec![0]);
        assert_eq!(nms_with_tiebreak(&p, &[0.5, 0.5], Some(&[0.0, 1.0]), 0.1, 0.0, None), vec![1]);
        assert_eq!(nms_with_tiebreak(&p, &[0.9, 0.8], None, 0.1, 0.0, Some(&[false, true])), vec![1]);
    }

    #[test]
    fn mirror_pairs() {
        let pc = PointCloud::new(vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert_eq!(symmetric_pairs(&pc, &SymmetryPlane::yz(), 0.01), vec![(0, 1)]);
        let pc = PointCloud::new(vec![[1.0, 0.0, 0.0], [-0.5, 0.0, 0.0]]);
        assert!(symmetric_pairs(&pc, &SymmetryPlane::yz(), 0.01).is_empty());
    }

    #[test]
    fn rotation_is_proper_and_seeded() {
        let r = random_rotation(7);
        assert_eq!(r, random_rotation(7));
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                assert!((d - f64::from(u8::from(i == j))).abs() < 1e-9);
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        assert!((det - 1.0).abs() < 1e-9);
    }
}
