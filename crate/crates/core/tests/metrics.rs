mod support;

use proptest::prelude::*;
use rand::Rng;

use kpgen_core::datagen::{generate, Family, ShapeSpec};
use kpgen_core::geometry::*;
use kpgen_core::metrics::*;
use support::{brute_nms, chamfer, rng};

fn brute_repeatability(a: &[Point], b: &[Point], thr: f32) -> f64 {
    let mut hit = 0;
    for p in a {
        let mut found = false;
        for q in b {
            let d: f64 = (0..3).map(|k| (f64::from(p[k]) - f64::from(q[k])).powi(2)).sum::<f64>().sqrt();
            if d < f64::from(thr) {
                found = true;
            }
        }
        hit += usize::from(found);
    }
    hit as f64 / a.len() as f64
}

/// Greedy matching by rescanning all free pairs for the minimum each round.
fn brute_greedy(dist: &[Vec<f64>], thr: f64) -> usize {
    let (nd, ng) = (dist.len(), dist.first().map_or(0, Vec::len));
    let (mut used_d, mut used_g) = (vec![false; nd], vec![false; ng]);
    let mut count = 0;
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in (0..nd).filter(|&i| !used_d[i]) {
            for j in (0..ng).filter(|&j| !used_g[j]) {
                let d = dist[i][j];
                if d <= thr && best.is_none_or(|b| d < b.0) {
                    best = Some((d, i, j));
                }
            }
        }
        let Some((_, i, j)) = best else { return count };
        used_d[i] = true;
        used_g[j] = true;
        count += 1;
    }
}

/// Maximum matching size among pairs within `thr`, by exhaustive search.
fn optimal_matching(dist: &[Vec<f64>], thr: f64, i: usize, used: &mut Vec<bool>) -> usize {
    if i == dist.len() {
        return 0;
    }
    let mut best = optimal_matching(dist, thr, i + 1, used);
    for j in 0..used.len() {
        if !used[j] && dist[i][j] <= thr {
            used[j] = true;
            best = best.max(1 + optimal_matching(dist, thr, i + 1, used));
            used[j] = false;
        }
    }
    best
}

fn random_points(r: &mut impl Rng, n: usize) -> Vec<Point> {
    (0..n).map(|_| [0; 3].map(|_| r.random_range(-1.0..1.0))).collect()
}

pub fn geometry_kernels_match_brute_force() {
    let mut r = rng(9);
    for t in 0..100 {
        let n = r.random_range(1..80);
        let pts = random_points(&mut r, n);
        let pc = PointCloud::new(pts.clone());
        let c = r.random_range(0..n);
        let rad = r.random_range(0.01..1.5);
        let want: Vec<usize> = (0..n).filter(|&i| dist2(pts[i], pts[c]) <= rad * rad).collect();
        assert_eq!(radius_neighbors(&pc, c, rad).unwrap(), want, "radius instance {t}");

        let scores: Vec<f32> = (0..n).map(|_| (r.random_range(0..10) as f32) / 10.0).collect();
        let thr = r.random_range(0.0..0.9);
        assert_eq!(nms(&pts, &scores, rad * 0.5, thr), brute_nms(&pts, &scores, rad * 0.5, thr), "nms instance {t}");

        let m = r.random_range(1..60);
        let other = random_points(&mut r, m);
        let to64 = |p: &[Point]| p.iter().map(|q| q.map(f64::from)).collect::<Vec<_>>();
        let want = chamfer(&to64(&pts), &to64(&other));
        let got = chamfer_distance(&pts, &other).unwrap();
        assert!((got - want).abs() <= 1e-6 * want.max(1.0), "chamfer instance {t}: {got} vs {want}");
    }
}

pub fn repeatability_fraction_matches_brute_force() {
    let mut r = rng(1);
    for _ in 0..100 {
        let (na, nb) = (r.random_range(1..20), r.random_range(0..20));
        let a = random_points(&mut r, na);
        let b = random_points(&mut r, nb);
        let thr = r.random_range(0.05..1.0);
        assert_eq!(repeatability_fraction(&a, &b, thr).unwrap(), brute_repeatability(&a, &b, thr));
    }
    assert!(repeatability_fraction(&[], &[[0.0; 3]], 0.1).is_err());
}

pub fn greedy_matching_matches_brute_force() {
    let mut r = rng(2);
    for _ in 0..100 {
        let (nd, ng) = (r.random_range(1..8), r.random_range(1..8));
        // Distinct distances so both implementations face no ties.
        let dist: Vec<Vec<f64>> = (0..nd).map(|_| (0..ng).map(|_| r.random_range(0.0..0.2)).collect()).collect();
        let thr = r.random_range(0.0..0.2);
        assert_eq!(greedy_match_count(&dist, ng, thr), brute_greedy(&dist, thr));
        assert!(greedy_match_count(&dist, ng, thr) <= optimal_matching(&dist, thr, 0, &mut vec![false; ng]));
    }
}

pub fn greedy_matches_optimum_on_five_versus_three() {
    // Five detections, three ground-truth points, each detection closest to a distinct target.
    let dist = vec![
        vec![0.01, 0.09, 0.3],
        vec![0.08, 0.02, 0.2],
        vec![0.5, 0.07, 0.03],
        vec![0.06, 0.5, 0.5],
        vec![0.4, 0.4, 0.09],
    ];
    for thr in MIOU_THRESHOLDS {
        let g = greedy_match_count(&dist, 3, thr);
        assert_eq!(g, optimal_matching(&dist, thr, 0, &mut vec![false; 3]), "threshold {thr}");
        assert_eq!(g, brute_greedy(&dist, thr));
    }
}

#[test]
fn miou_on_generated_shapes() {
    let pc = generate(&ShapeSpec::random(Family::Box, 512, 0.0, 3)).unwrap();
    let gt = pc.gt_keypoints.clone().unwrap();
    assert_eq!(keypoint_miou(&gt, &gt, &pc, 0.01).unwrap(), 1.0);
    let half = &gt[..4];
    // Four of eight matched: 4 / (4 + 8 − 4).
    assert!((keypoint_miou(half, &gt, &pc, 0.05).unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(keypoint_miou(&[], &gt, &pc, 0.05).unwrap(), 0.0);
    assert!(keypoint_miou(&gt, &[], &pc, 0.05).is_err());
}

#[test]
fn kmeans_purity_on_twelve_keypoints() {
    let mut r = rng(4);
    let centers = [[0.0, 0.0, 0.0], [5.0, 0.0, 0.0], [0.0, 5.0, 0.0]];
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for (c, ctr) in centers.iter().enumerate() {
        for _ in 0..4 {
            x.push([0, 1, 2].map(|k| ctr[k] + r.random_range(-0.3..0.3)));
            labels.push(c as i32);
        }
    }
    let km = kmeans(&x, 3, 7).unwrap();
    assert_eq!(cluster_purity(&km.assignment, &labels, 3), 100.0);
    // One mislabeled member: that cluster drops to 3/4.
    labels[0] = 2;
    let want = 100.0 * (0.75 + 1.0 + 1.0) / 3.0;
    assert!((cluster_purity(&km.assignment, &labels, 3) - want).abs() < 1e-9);
    assert_eq!(km, kmeans(&x, 3, 7).unwrap());
}

#[test]
fn oracle_detector_is_fully_repeatable() {
    for family in [Family::Rectangle, Family::Table] {
        let pc = generate(&ShapeSpec::random(family, 512, 0.002, 5)).unwrap();
        let v = rotation_repeatability(
            |c: &PointCloud| Ok(c.gt_keypoints.clone().unwrap()),
            &pc,
            4,
            0.1,
            20,
            1,
        )
        .unwrap();
        assert_eq!(v, 100.0);
    }
}

#[test]
fn corr_iou_of_gt_under_downsampling() {
    let pc = generate(&ShapeSpec::random(Family::Table, 2048, 0.002, 6)).unwrap();
    let gt = pc.gt_keypoints.clone().unwrap();
    let a = DetectionResult::new("a", gt.clone(), vec![1.0; gt.len()]);
    let ids = pc.correspondence_ids.as_ref().unwrap();
    assert_eq!(correspondence_iou(&a, ids, &a, ids, false).unwrap(), 100.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iou_is_symmetric_and_bounded(ids in prop::collection::vec(0i32..30, 40), a in prop::collection::btree_set(0usize..40, 1..10), b in prop::collection::btree_set(0usize..40, 1..10), dice in any::<bool>()) {
        let ra = DetectionResult::new("a", a.into_iter().collect(), vec![]);
        let rb = DetectionResult::new("b", b.into_iter().collect(), vec![]);
        let ab = correspondence_iou(&ra, &ids, &rb, &ids, dice);
        let ba = correspondence_iou(&rb, &ids, &ra, &ids, dice);
        match (ab, ba) {
            (Ok(x), Ok(y)) => {
                prop_assert_eq!(x, y);
                prop_assert!((0.0..=100.0).contains(&x));
            }
            (Err(_), Err(_)) => {}
            (x, y) => prop_assert!(false, "asymmetric outcome {:?} {:?}", x, y),
        }
    }

    #[test]
    fn miou_is_monotone_and_bounded(seed in any::<u64>(), nd in 0usize..10) {
        let pc = generate(&ShapeSpec::random(Family::Chair, 256, 0.002, seed)).unwrap();
        let mut r = rng(seed);
        let det: Vec<usize> = (0..nd).map(|_| r.random_range(0..256)).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let gt = pc.gt_keypoints.clone().unwrap();
        let curve = miou_curve(&det, &gt, &pc, &MIOU_THRESHOLDS).unwrap();
        prop_assert!(curve.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(curve.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn single_label_purity_is_full(seed in any::<u64>(), k in 1usize..6) {
        let mut r = rng(seed);
        let x: Vec<[f64; 3]> = (0..12).map(|_| [0; 3].map(|_| r.random_range(-1.0..1.0))).collect();
        let km = kmeans(&x, k, seed).unwrap();
        let v = cluster_purity(&km.assignment, &[3; 12], k);
        prop_assert_eq!(v, 100.0);
        let mixed: Vec<i32> = (0..12).map(|_| r.random_range(0..4)).collect();
        let p = cluster_purity(&km.assignment, &mixed, k);
        prop_assert!((0.0..=100.0).contains(&p));
    }

    #[test]
    fn repeatability_is_a_fraction(seed in any::<u64>(), na in 1usize..15, nb in 0usize..15, thr in 0.01f32..2.0) {
        let mut r = rng(seed);
        let a = random_points(&mut r, na);
        let b = random_points(&mut r, nb);
        let v = repeatability_fraction(&a, &b, thr).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(repeatability_fraction(&a, &a, thr).unwrap(), 1.0);
    }
}

support::as_tests!(
    geometry_kernels_match_brute_force,
    repeatability_fraction_matches_brute_force,
    greedy_matching_matches_brute_force,
    greedy_matches_optimum_on_five_versus_three,
);
