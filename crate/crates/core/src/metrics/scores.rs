use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::detection::DetectionResult;
use crate::error::{Error, Result};
use crate::geometry::{apply, rotation_from_rng, GeodesicGraph, Point, PointCloud, GEODESIC_K};

pub const KMEANS_RESTARTS: usize = 10;
pub const KMEANS_TOL: f64 = 1e-6;
const KMEANS_MAX_ITERS: usize = 500;

/// Geodesic thresholds for the mIoU curve: 0.01, 0.02, ..., 0.1.
pub const MIOU_THRESHOLDS: [f64; 10] = [0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09, 0.1];

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<[f64; 3]>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
}

fn d2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

fn nearest(c: &[[f64; 3]], p: &[f64; 3]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, q) in c.iter().enumerate() {
        let d = d2(p, q);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_once(x: &[[f64; 3]], k: usize, rng: &mut ChaCha8Rng) -> KMeans {
    // k-means++ seeding
    let mut c = vec![x[rng.random_range(0..x.len())]];
    while c.len() < k {
        let w: Vec<f64> = x.iter().map(|p| nearest(&c, p).1).collect();
        let total: f64 = w.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut i = 0;
            while i + 1 < x.len() && u >= w[i] {
                u -= w[i];
                i += 1;
            }
            i
        } else {
            rng.random_range(0..x.len())
        };
        c.push(x[pick]);
    }
    let mut assignment = vec![0; x.len()];
    for _ in 0..KMEANS_MAX_ITERS {
        for (a, p) in assignment.iter_mut().zip(x) {
            *a = nearest(&c, p).0;
        }
        let mut sum = vec![[0.0; 3]; k];
        let mut cnt = vec![0usize; k];
        for (p, &a) in x.iter().zip(&assignment) {
            cnt[a] += 1;
            for d in 0..3 {
                sum[a][d] += p[d];
            }
        }
        let mut shift = 0.0f64;
        for j in 0..k {
            if cnt[j] > 0 {
                let m = sum[j].map(|s| s / cnt[j] as f64);
                shift = shift.max(d2(&m, &c[j]).sqrt());
                c[j] = m;
            }
        }
        if shift < KMEANS_TOL {
            break;
        }
    }
    for (a, p) in assignment.iter_mut().zip(x) {
        *a = nearest(&c, p).0;
    }
    let inertia = x.iter().zip(&assignment).map(|(p, &a)| d2(p, &c[a])).sum();
    KMeans {
        centroids: c,
        assignment,
        inertia,
    }
}

/// Lloyd iterations from k-means++ seeds; the lowest-inertia of
/// [`KMEANS_RESTARTS`] seeded runs is kept.
pub fn kmeans(x: &[[f64; 3]], k: usize, seed: u64) -> Result<KMeans> {
    if k == 0 || x.len() < k {
        return Err(Error::Metric(format!("cannot form {k} clusters from {} points", x.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeans> = None;
    for _ in 0..KMEANS_RESTARTS {
        let run = kmeans_once(x, k, &mut rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Mean over non-empty clusters of (majority label count / cluster size), as a percentage.
pub fn cluster_purity(assignment: &[usize], labels: &[i32], k: usize) -> f64 {
    let mut hist: Vec<BTreeMap<i32, usize>> = vec![BTreeMap::new(); k];
    for (&a, &l) in assignment.iter().zip(labels) {
        *hist[a].entry(l).or_default() += 1;
    }
    let ratios: Vec<f64> = hist
        .iter()
        .filter(|h| !h.is_empty())
        .map(|h| *h.values().max().unwrap() as f64 / h.values().sum::<usize>() as f64)
        .collect();
    100.0 * ratios.iter().sum::<f64>() / ratios.len().max(1) as f64
}

/// Pools every detected keypoint across clouds, clusters the coordinates
/// into `k` groups and scores label purity. Clouds must be aligned.
pub fn mean_correspondence_ratio(results: &[DetectionResult], clouds: &[PointCloud], k: usize, seed: u64) -> Result<f64> {
    if results.len() != clouds.len() {
        return Err(Error::Metric(format!("{} results for {} clouds", results.len(), clouds.len())));
    }
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for (r, pc) in results.iter().zip(clouds) {
        r.validate(pc.len())?;
        let lab = pc
            .part_labels
            .as_ref()
            .ok_or_else(|| Error::Metric(format!("{}: cloud has no part labels", r.cloud_id)))?;
        for &i in &r.keypoint_indices {
            x.push(pc.points[i].map(f64::from));
            labels.push(lab[i]);
        }
    }
    if x.len() < k {
        return Err(Error::Metric(format!("{} keypoints in total, fewer than k = {k}", x.len())));
    }
    let km = kmeans(&x, k, seed)?;
    Ok(cluster_purity(&km.assignment, &labels, k))
}

/// Greedy matching by ascending distance: repeatedly takes the closest
/// remaining (detected, gt) pair with distance ≤ `threshold`.
/// `dist[i][j]` is the distance from detection `i` to ground truth `j`.
pub fn greedy_match_count(dist: &[Vec<f64>], n_gt: usize, threshold: f64) -> usize {
    let mut cand: Vec<(f64, usize, usize)> = Vec::new();
    for (i, row) in dist.iter().enumerate() {
        for (j, &d) in row.iter().enumerate().take(n_gt) {
            if d.is_finite() && d <= threshold {
                cand.push((d, i, j));
            }
        }
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_d = vec![false; dist.len()];
    let mut used_g = vec![false; n_gt];
    let mut m = 0;
    for (_, i, j) in cand {
        if !used_d[i] && !used_g[j] {
            used_d[i] = true;
            used_g[j] = true;
            m += 1;
        }
    }
    m
}

/// Geodesic distances from each detection to each ground-truth keypoint.
pub fn geodesic_matrix(graph: &GeodesicGraph, detected: &[usize], gt: &[usize]) -> Vec<Vec<f64>> {
    detected
        .iter()
        .map(|&d| {
            let all = graph.distances(d);
            gt.iter().map(|&g| all[g]).collect()
        })
        .collect()
}

fn check_indices(idx: &[usize], n: usize, what: &str) -> Result<()> {
    match idx.iter().find(|&&i| i >= n) {
        Some(i) => Err(Error::Metric(format!("{what} index {i} outside cloud of {n}"))),
        None => Ok(()),
    }
}

/// `matched / (|detected| + |gt| − matched)` with greedy geodesic matching.
/// Unreachable pairs never match.
pub fn keypoint_miou(detected: &[usize], gt: &[usize], pc: &PointCloud, geo_threshold: f64) -> Result<f64> {
    Ok(miou_curve(detected, gt, pc, &[geo_threshold])?[0])
}

/// [`keypoint_miou`] at each threshold, sharing one geodesic computation.
pub fn miou_curve(detected: &[usize], gt: &[usize], pc: &PointCloud, thresholds: &[f64]) -> Result<Vec<f64>> {
    if gt.is_empty() {
        return Err(Error::Metric("ground-truth keypoint set is empty".into()));
    }
    check_indices(detected, pc.len(), "detected")?;
    check_indices(gt, pc.len(), "ground-truth")?;
    let graph = GeodesicGraph::new(&pc.points, GEODESIC_K);
    let dist = geodesic_matrix(&graph, detected, gt);
    Ok(thresholds
        .iter()
        .map(|&t| {
            let m = greedy_match_count(&dist, gt.len(), t);
            m as f64 / (detected.len() + gt.len() - m) as f64
        })
        .collect())
}

/// Fraction of `a` whose nearest point in `b` lies strictly within `threshold`.
pub fn repeatability_fraction(a: &[Point], b: &[Point], threshold: f32) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::Metric("no keypoints to test for repeatability".into()));
    }
    let t2 = f64::from(threshold).powi(2);
    let hit = a
        .iter()
        .filter(|p| {
            b.iter().any(|q| (0..3).map(|k| (f64::from(p[k]) - f64::from(q[k])).powi(2)).sum::<f64>() < t2)
        })
        .count();
    Ok(hit as f64 / a.len() as f64)
}

fn transpose(r: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = r[j][i];
        }
    }
    t
}

/// Mean repeatability over `n_rotations` seeded random rotations, as a
/// percentage. `detect` returns ranked keypoint indices of the cloud it is
/// given; the first `n_keypoints` are used on both sides, and keypoints of
/// the rotated cloud are mapped back through the inverse rotation.
pub fn rotation_repeatability<F>(
    mut detect: F,
    pc: &PointCloud,
    n_keypoints: usize,
    dist_threshold: f32,
    n_rotations: usize,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&PointCloud) -> Result<Vec<usize>>,
{
    if n_keypoints == 0 || n_rotations == 0 {
        return Err(Error::Metric("repeatability needs at least one keypoint and one rotation".into()));
    }
    let take = |idx: Vec<usize>, which: &str| -> Result<Vec<usize>> {
        if idx.len() < n_keypoints {
            return Err(Error::Metric(format!(
                "detector returned {} keypoints on the {which} cloud, {n_keypoints} required",
                idx.len()
            )));
        }
        check_indices(&idx[..n_keypoints], pc.len(), "keypoint")?;
        Ok(idx[..n_keypoints].to_vec())
    };
    let base = take(detect(pc)?, "original")?;
    let a: Vec<Point> = base.iter().map(|&i| pc.points[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..n_rotations {
        let r = rotation_from_rng(&mut rng);
        let rotated = pc.rotated(&r);
        let kp = take(detect(&rotated)?, "rotated")?;
        let back = transpose(&r);
        let b: Vec<Point> = kp.iter().map(|&i| apply(&back, rotated.points[i])).collect();
        total += repeatability_fraction(&a, &b, dist_threshold)?;
    }
    Ok(100.0 * total / n_rotations as f64)
}

fn id_set(r: &DetectionResult, corr: &[i32]) -> Result<BTreeSet<i32>> {
    let mut s = BTreeSet::new();
    for &i in &r.keypoint_indices {
        let id = *corr.get(i).ok_or_else(|| {
            Error::Metric(format!("{}: keypoint {i} outside correspondence map of {}", r.cloud_id, corr.len()))
        })?;
        if id < 0 {
            return Err(Error::Metric(format!("{}: keypoint {i} has no correspondence id", r.cloud_id)));
        }
        // Keypoints in the same correspondence cell count once.
        s.insert(id);
    }
    Ok(s)
}

/// Overlap of two detections through correspondence ids, as a percentage:
/// `|A ∩ B| / |A ∪ B|`, or `2|A ∩ B| / (|A| + |B|)` when `dice` is set.
pub fn correspondence_iou(
    a: &DetectionResult,
    corr_a: &[i32],
    b: &DetectionResult,
    corr_b: &[i32],
    dice: bool,
) -> Result<f64> {
    let sa = id_set(a, corr_a)?;
    let sb = id_set(b, corr_b)?;
    let inter = sa.intersection(&sb).count() as f64;
    let denom = if dice {
        (sa.len() + sb.len()) as f64 / 2.0
    } else {
        sa.union(&sb).count() as f64
    };
    if denom == 0.0 {
        return Err(Error::Metric("both detections are empty".into()));
    }
    Ok(100.0 * inter / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn purity_majority() {
        assert_eq!(cluster_purity(&[0, 0, 0, 0], &[1, 1, 2, 2], 1), 50.0);
        assert_eq!(cluster_purity(&[0, 1, 0, 1], &[3, 4, 3, 4], 2), 100.0);
    }

    #[test]
    fn kmeans_separates_blobs() {
        let mut x = Vec::new();
        for c in [[0.0, 0.0, 0.0], [5.0, 0.0, 0.0], [0.0, 5.0, 0.0]] {
            for k in 0..4 {
                x.push([c[0] + 0.1 * k as f64, c[1], c[2] - 0.05 * k as f64]);
            }
        }
        let km = kmeans(&x, 3, 7).unwrap();
        for blob in km.assignment.chunks(4) {
            assert!(blob.iter().all(|&a| a == blob[0]));
        }
        let distinct: BTreeSet<_> = km.assignment.iter().collect();
        assert_eq!(distinct.len(), 3);
        assert!(kmeans(&x, 13, 0).is_err());
    }

    #[test]
    fn iou_cases() {
        let corr: Vec<i32> = (0..10).collect();
        let r = |v: Vec<usize>| DetectionResult::new("c", v.clone(), vec![1.0; v.len()]);
        assert_eq!(correspondence_iou(&r(vec![1, 2, 3]), &corr, &r(vec![2, 3, 4]), &corr, false).unwrap(), 50.0);
        assert!((correspondence_iou(&r(vec![1, 2, 3]), &corr, &r(vec![2, 3, 4]), &corr, true).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(correspondence_iou(&r(vec![1]), &corr, &r(vec![2]), &corr, false).unwrap(), 0.0);
        let collide = [0, 0, 1];
        // Two keypoints in one cell count as one id: {0, 1} against {1}.
        assert_eq!(correspondence_iou(&r(vec![0, 1, 2]), &collide, &r(vec![2]), &collide, false).unwrap(), 50.0);
    }

    #[test]
    fn greedy_prefers_closest_pair() {
        // d0 is close to both, d1 only to g0; greedy takes (d0, g0) first
        // and leaves d1 unmatched even though a perfect matching exists.
        let dist = vec![vec![0.01, 0.02], vec![0.03, 1.0]];
        assert_eq!(greedy_match_count(&dist, 2, 0.05), 1);
        assert_eq!(greedy_match_count(&dist, 2, 0.005), 0);
        assert_eq!(greedy_match_count(&[vec![f64::INFINITY]], 1, 1e9), 0);
    }
}
