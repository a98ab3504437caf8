use std::fmt::Write as _;

use kpgen_core::geometry::PointCloud;

/// Red-blue color for a probability: 0 is pure blue, 1 pure red.
pub fn color(phi: f32) -> [u8; 3] {
    let t = if phi.is_nan() { 0.0 } else { phi.clamp(0.0, 1.0) };
    let r = (255.0 * t).round() as u8;
    [r, 0, 255 - r]
}

/// ASCII PLY with `x y z red green blue` vertices.
pub fn colored_ply(pc: &PointCloud, phi: &[f32]) -> String {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\ncomment keypoint probability heatmap\n");
    let _ = writeln!(s, "element vertex {}", pc.len());
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n");
    for (p, &v) in pc.points.iter().zip(phi) {
        let [r, g, b] = color(v);
        let _ = writeln!(s, "{} {} {} {r} {g} {b}", p[0], p[1], p[2]);
    }
    s
}

#[cfg(test)]
mod tests {
    use std::path::Path;

    use kpgen_core::geometry::ply::parse_ply;

    use super::*;

    fn vertex_colors(text: &str) -> Vec<[u8; 3]> {
        let body = text.split("end_header\n").nth(1).unwrap();
        body.lines()
            .map(|l| {
                let t: Vec<u8> = l.split_whitespace().skip(3).map(|v| v.parse().unwrap()).collect();
                [t[0], t[1], t[2]]
            })
            .collect()
    }

    #[test]
    fn saturated_maps_and_round_trip() {
        let pc = PointCloud::new(vec![[0.0, 0.5, 1.0], [0.25, -1.0, 0.0], [0.1, 0.2, 0.3]]);
        let red = colored_ply(&pc, &[1.0; 3]);
        assert!(vertex_colors(&red).iter().all(|c| *c == [255, 0, 0]));
        let blue = colored_ply(&pc, &[0.0; 3]);
        assert!(vertex_colors(&blue).iter().all(|c| *c == [0, 0, 255]));
        let back = parse_ply(&red, Path::new("h.ply")).unwrap();
        assert_eq!(back.points, pc.points);
    }

    #[test]
    fn midpoint_and_out_of_range() {
        assert_eq!(color(0.5), [128, 0, 127]);
        assert_eq!(color(2.0), [255, 0, 0]);
        assert_eq!(color(f32::NAN), [0, 0, 255]);
    }
}
