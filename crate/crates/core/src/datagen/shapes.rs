use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::error::{Error, Result};
use crate::geometry::{dist2, normalize_cloud, Point, PointCloud, SymmetryPlane};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Rectangle,
    Box,
    Table,
    Chair,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Rectangle, Family::Box, Family::Table, Family::Chair];

    pub fn name(self) -> &'static str {
        match self {
            Family::Rectangle => "rectangle",
            Family::Box => "box",
            Family::Table => "table",
            Family::Chair => "chair",
        }
    }

    /// Names of the size parameters, in `ShapeSpec::size` order.
    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            Family::Rectangle => &["width", "height"],
            Family::Box => &["width", "depth", "height"],
            Family::Table => &["top_width", "top_depth", "top_thickness", "leg_height", "leg_width"],
            Family::Chair => &[
                "seat_width",
                "seat_depth",
                "seat_thickness",
                "leg_height",
                "leg_width",
                "back_height",
                "back_thickness",
            ],
        }
    }

    /// Draws size parameters from the family's default ranges.
    pub fn random_size<R: Rng>(self, rng: &mut R) -> Vec<f64> {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        match self {
            Family::Rectangle => vec![u(0.8, 1.6), u(0.5, 1.0)],
            Family::Box => vec![u(0.6, 1.2), u(0.5, 1.0), u(0.4, 0.9)],
            Family::Table => vec![u(1.0, 1.6), u(0.6, 1.0), u(0.05, 0.1), u(0.6, 0.9), u(0.06, 0.1)],
            Family::Chair => vec![
                u(0.5, 0.7),
                u(0.5, 0.7),
                u(0.05, 0.08),
                u(0.4, 0.6),
                u(0.05, 0.08),
                u(0.5, 0.8),
                u(0.05, 0.08),
            ],
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Generation(format!("unknown shape family '{s}' (expected rectangle, box, table or chair)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSpec {
    pub family: Family,
    pub size: Vec<f64>,
    pub n_points: usize,
    pub jitter: f64,
    pub seed: u64,
}

impl ShapeSpec {
    /// Family defaults with sizes drawn from `seed`.
    pub fn random(family: Family, n_points: usize, jitter: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ShapeSpec {
            family,
            size: family.random_size(&mut rng),
            n_points,
            jitter,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let names = self.family.param_names();
        if self.size.len() != names.len() {
            return Err(Error::Generation(format!(
                "{} needs {} size parameters ({}), got {}",
                self.family,
                names.len(),
                names.join(", "),
                self.size.len()
            )));
        }
        if let Some((n, v)) = names.iter().zip(&self.size).find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Generation(format!("{} parameter {n} must be positive, got {v}", self.family)));
        }
        if self.n_points < 64 {
            return Err(Error::Generation(format!("n_points must be at least 64, got {}", self.n_points)));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::Generation(format!("jitter must be non-negative, got {}", self.jitter)));
        }
        let s = &self.size;
        match self.family {
            Family::Table if 2.0 * s[4] >= s[0].min(s[1]) => {
                Err(Error::Generation("table legs are wider than the top".into()))
            }
            Family::Chair if 2.0 * s[4] >= s[0].min(s[1]) || s[6] >= s[1] => {
                Err(Error::Generation("chair legs or back are wider than the seat".into()))
            }
            _ => Ok(()),
        }
    }
}

/// A planar rectangular surface piece `origin + u·a + v·b`, `u, v ∈ [0, 1]`.
#[derive(Clone, Debug)]
struct Patch {
    origin: [f64; 3],
    a: [f64; 3],
    b: [f64; 3],
    label: i32,
    /// First correspondence id of this patch.
    id_base: i32,
    cells: [usize; 2],
}

/// Metric edge of a correspondence cell.
pub const CORR_CELL: f64 = 0.2;

impl Patch {
    fn area(&self) -> f64 {
        let c = cross(self.a, self.b);
        (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()
    }

    fn at(&self, u: f64, v: f64) -> [f64; 3] {
        [0, 1, 2].map(|i| self.origin[i] + u * self.a[i] + v * self.b[i])
    }

    /// Surface coordinates of a point on this patch.
    fn locate(&self, p: [f64; 3]) -> (f64, f64) {
        let d = [0, 1, 2].map(|i| p[i] - self.origin[i]);
        let u = dot(d, self.a) / dot(self.a, self.a);
        let v = dot(d, self.b) / dot(self.b, self.b);
        (u.clamp(0.0, 1.0), v.clamp(0.0, 1.0))
    }

    fn corr_id(&self, u: f64, v: f64) -> i32 {
        let cu = ((u * self.cells[0] as f64) as usize).min(self.cells[0] - 1);
        let cv = ((v * self.cells[1] as f64) as usize).min(self.cells[1] - 1);
        self.id_base + (cu * self.cells[1] + cv) as i32
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

struct Surface {
    patches: Vec<Patch>,
    keypoints: Vec<[f64; 3]>,
}

impl Surface {
    fn new() -> Self {
        Surface {
            patches: Vec::new(),
            keypoints: Vec::new(),
        }
    }

    fn patch(&mut self, origin: [f64; 3], a: [f64; 3], b: [f64; 3], label: i32) {
        let len = |v: [f64; 3]| dot(v, v).sqrt();
        let cells = [(len(a) / CORR_CELL).ceil().max(1.0) as usize, (len(b) / CORR_CELL).ceil().max(1.0) as usize];
        let id_base = self
            .patches
            .last()
            .map_or(0, |p| p.id_base + (p.cells[0] * p.cells[1]) as i32);
        self.patches.push(Patch {
            origin,
            a,
            b,
            label,
            id_base,
            cells,
        });
    }

    /// Faces of the cuboid `[lo, hi]`; `skip_top`/`skip_bottom` omit hidden contact faces.
    fn cuboid(&mut self, lo: [f64; 3], hi: [f64; 3], label: i32, skip_top: bool, skip_bottom: bool) {
        let [x0, y0, z0] = lo;
        let [x1, y1, z1] = hi;
        let (dx, dy, dz) = (x1 - x0, y1 - y0, z1 - z0);
        if !skip_bottom {
            self.patch([x0, y0, z0], [dx, 0.0, 0.0], [0.0, dy, 0.0], label);
        }
        if !skip_top {
            self.patch([x0, y0, z1], [dx, 0.0, 0.0], [0.0, dy, 0.0], label);
        }
        self.patch([x0, y0, z0], [dx, 0.0, 0.0], [0.0, 0.0, dz], label);
        self.patch([x0, y1, z0], [dx, 0.0, 0.0], [0.0, 0.0, dz], label);
        self.patch([x0, y0, z0], [0.0, dy, 0.0], [0.0, 0.0, dz], label);
        self.patch([x1, y0, z0], [0.0, dy, 0.0], [0.0, 0.0, dz], label);
    }

    fn nearest_patch(&self, p: [f64; 3]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (k, pa) in self.patches.iter().enumerate() {
            let (u, v) = pa.locate(p);
            let q = pa.at(u, v);
            let d = (0..3).map(|i| (q[i] - p[i]).powi(2)).sum::<f64>();
            if d < best.0 - 1e-15 {
                best = (d, k);
            }
        }
        best.1
    }
}

/// Legs at the four corners of a `w × d` footprint, inset by half a leg width.
fn leg_boxes(w: f64, d: f64, lw: f64, h: f64) -> Vec<([f64; 3], [f64; 3])> {
    let cx = w / 2.0 - lw;
    let cy = d / 2.0 - lw;
    let mut out = Vec::new();
    for (sx, sy) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
        let c = [sx * cx, sy * cy];
        out.push(([c[0] - lw / 2.0, c[1] - lw / 2.0, 0.0], [c[0] + lw / 2.0, c[1] + lw / 2.0, h]));
    }
    out
}

fn build_surface(spec: &ShapeSpec) -> Surface {
    let s = &spec.size;
    let mut surf = Surface::new();
    match spec.family {
        Family::Rectangle => {
            let (w, h) = (s[0], s[1]);
            surf.patch([-w / 2.0, -h / 2.0, 0.0], [w, 0.0, 0.0], [0.0, h, 0.0], 0);
            for (x, y) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
                surf.keypoints.push([x * w / 2.0, y * h / 2.0, 0.0]);
            }
        }
        Family::Box => {
            let (w, d, h) = (s[0] / 2.0, s[1] / 2.0, s[2] / 2.0);
            surf.cuboid([-w, -d, -h], [w, d, h], 0, false, false);
            for i in 0..8 {
                let pick = |bit: usize, v: f64| if i >> bit & 1 == 1 { v } else { -v };
                surf.keypoints.push([pick(0, w), pick(1, d), pick(2, h)]);
            }
        }
        Family::Table => {
            let (w, d, t, lh, lw) = (s[0], s[1], s[2], s[3], s[4]);
            surf.cuboid([-w / 2.0, -d / 2.0, lh], [w / 2.0, d / 2.0, lh + t], 0, false, false);
            for (k, (lo, hi)) in leg_boxes(w, d, lw, lh).into_iter().enumerate() {
                surf.cuboid(lo, hi, k as i32 + 1, true, false);
                surf.keypoints.push([(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, 0.0]);
            }
            for (x, y) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
                surf.keypoints.push([x * w / 2.0, y * d / 2.0, lh + t]);
            }
        }
        Family::Chair => {
            let (w, d, t, lh, lw, bh, bt) = (s[0], s[1], s[2], s[3], s[4], s[5], s[6]);
            surf.cuboid([-w / 2.0, -d / 2.0, lh], [w / 2.0, d / 2.0, lh + t], 0, false, false);
            for (k, (lo, hi)) in leg_boxes(w, d, lw, lh).into_iter().enumerate() {
                surf.cuboid(lo, hi, k as i32 + 1, true, false);
                surf.keypoints.push([(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, 0.0]);
            }
            let y0 = -d / 2.0;
            surf.cuboid([-w / 2.0, y0, lh + t], [w / 2.0, y0 + bt, lh + t + bh], 5, false, true);
            for (x, y) in [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)] {
                let y = if y < 0.0 { y0 + bt } else { d / 2.0 };
                surf.keypoints.push([x * w / 2.0, y, lh + t]);
            }
            for x in [-1.0, 1.0] {
                surf.keypoints.push([x * w / 2.0, y0, lh + t + bh]);
            }
        }
    }
    surf
}

/// Samples the shape surface, mirror-symmetric about `x = 0`, normalized.
///
/// The analytic keypoints are part of the sample; the remaining points come
/// in mirror pairs drawn uniformly by area.
pub fn generate(spec: &ShapeSpec) -> Result<PointCloud> {
    spec.validate()?;
    let surf = build_surface(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let noise = Normal::new(0.0, spec.jitter.max(0.0)).map_err(|e| Error::Generation(e.to_string()))?;
    let jit = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        if spec.jitter == 0.0 {
            [0.0; 3]
        } else {
            [noise.sample(rng), noise.sample(rng), noise.sample(rng)]
        }
    };
    let areas: Vec<f64> = surf.patches.iter().map(Patch::area).collect();
    let pick = WeightedIndex::new(&areas).map_err(|e| Error::Generation(e.to_string()))?;

    // (surface position, jittered position)
    let mut samples: Vec<([f64; 3], [f64; 3])> = Vec::with_capacity(spec.n_points);
    for k in &surf.keypoints {
        let j = jit(&mut rng);
        samples.push((*k, [k[0] + j[0], k[1] + j[1], k[2] + j[2]]));
    }
    while samples.len() < spec.n_points {
        let pa = &surf.patches[pick.sample(&mut rng)];
        let (u, v) = (rng.random::<f64>(), rng.random::<f64>());
        let p = pa.at(u, v);
        let j = jit(&mut rng);
        let q = [p[0] + j[0], p[1] + j[1], p[2] + j[2]];
        samples.push((p, q));
        if samples.len() < spec.n_points {
            samples.push(([-p[0], p[1], p[2]], [-q[0], q[1], q[2]]));
        }
    }

    // Keypoints must not sit at predictable indices.
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let samples: Vec<_> = order.iter().map(|&i| samples[i]).collect();
    let mut keypoints = vec![0; surf.keypoints.len()];
    for (new, &old) in order.iter().enumerate() {
        if old < keypoints.len() {
            keypoints[old] = new;
        }
    }

    let mut labels = Vec::with_capacity(samples.len());
    let mut corr = Vec::with_capacity(samples.len());
    for (p, _) in &samples {
        let k = surf.nearest_patch(*p);
        let pa = &surf.patches[k];
        let (u, v) = pa.locate(*p);
        labels.push(pa.label);
        corr.push(pa.corr_id(u, v));
    }
    let points: Vec<Point> = samples.iter().map(|(_, q)| q.map(|c| c as f32)).collect();
    let pc = PointCloud {
        points,
        part_labels: Some(labels),
        gt_keypoints: Some(keypoints),
        correspondence_ids: Some(corr),
        symmetry_plane: Some(SymmetryPlane::yz()),
    };
    normalize_cloud(&pc)
}

/// Index of the point nearest to `q` (lowest index on ties).
pub(crate) fn nearest_index(points: &[Point], q: Point) -> usize {
    let mut best = (f32::INFINITY, 0);
    for (i, p) in points.iter().enumerate() {
        let d = dist2(*p, q);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rectangle_has_four_corner_keypoints() {
        let pc = generate(&ShapeSpec::random(Family::Rectangle, 256, 0.0, 1)).unwrap();
        assert_eq!(pc.gt_keypoints.as_ref().unwrap().len(), 4);
        assert_eq!(pc.len(), 256);
        pc.validate().unwrap();
    }

    #[test]
    fn same_seed_same_cloud() {
        for f in Family::ALL {
            let s = ShapeSpec::random(f, 128, 0.01, 5);
            assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
        }
    }

    #[test]
    fn invalid_parameters_rejected() {
        let mut s = ShapeSpec::random(Family::Table, 128, 0.0, 0);
        s.size[4] = 10.0;
        assert!(generate(&s).is_err());
        s.size = vec![1.0];
        assert!(generate(&s).is_err());
        let s = ShapeSpec::random(Family::Box, 10, 0.0, 0);
        assert!(generate(&s).is_err());
        assert!("sofa".parse::<Family>().is_err());
    }

    #[test]
    fn table_labels_cover_top_and_legs() {
        let pc = generate(&ShapeSpec::random(Family::Table, 2048, 0.0, 2)).unwrap();
        let labels = pc.part_labels.unwrap();
        for l in 0..5 {
            assert!(labels.contains(&l), "missing label {l}");
        }
        assert_eq!(pc.gt_keypoints.unwrap().len(), 8);
    }
}
