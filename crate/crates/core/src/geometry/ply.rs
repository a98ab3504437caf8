//! ASCII PLY point files.
//!
//! Vertex properties `x y z` (float) are required; `part` and `corr` (int)
//! are optional; anything else is skipped with a warning. Header comments
//! `symmetry_plane nx ny nz d` and `keypoint <index>` carry annotations.
//! Files with a non-empty face element are rejected.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::cloud::{PointCloud, SymmetryPlane};
use crate::autograd::checkpoint::write_atomic;
use crate::error::{Error, Result};

pub fn to_ply_string(pc: &PointCloud) -> String {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    if let Some(pl) = &pc.symmetry_plane {
        let [a, b, c] = pl.normal;
        let _ = writeln!(s, "comment symmetry_plane {a} {b} {c} {}", pl.offset);
    }
    for k in pc.gt_keypoints.iter().flatten() {
        let _ = writeln!(s, "comment keypoint {k}");
    }
    let _ = writeln!(s, "element vertex {}", pc.len());
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    if pc.part_labels.is_some() {
        s.push_str("property int part\n");
    }
    if pc.correspondence_ids.is_some() {
        s.push_str("property int corr\n");
    }
    s.push_str("end_header\n");
    for (i, p) in pc.points.iter().enumerate() {
        // `{}` on f32 prints the shortest text that parses back bit-exactly.
        let _ = write!(s, "{} {} {}", p[0], p[1], p[2]);
        if let Some(l) = &pc.part_labels {
            let _ = write!(s, " {}", l[i]);
        }
        if let Some(c) = &pc.correspondence_ids {
            let _ = write!(s, " {}", c[i]);
        }
        s.push('\n');
    }
    s
}

pub fn write_ply(path: &Path, pc: &PointCloud) -> Result<()> {
    pc.validate()?;
    write_atomic(path, to_ply_string(pc).as_bytes())
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&text, path)
}

#[derive(Clone, Copy, PartialEq)]
enum Field {
    X,
    Y,
    Z,
    Part,
    Corr,
    Skip,
}

/// Parses PLY text; `path` is used only in error messages.
pub fn parse_ply(text: &str, path: &Path) -> Result<PointCloud> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(err(1, "missing 'ply' magic".into())),
    }
    let mut n_vertices: Option<usize> = None;
    let mut in_vertex = false;
    let mut fields = Vec::new();
    let mut plane = None;
    let mut keypoints = Vec::new();
    let mut header_done = false;
    for (ln, line) in lines.by_ref() {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            [] => {}
            ["end_header"] => {
                header_done = true;
                break;
            }
            ["format", "ascii", _] => {}
            ["format", other, ..] => return Err(err(ln, format!("unsupported format '{other}'"))),
            ["comment", "symmetry_plane", rest @ ..] => {
                let v: Vec<f64> = rest
                    .iter()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| err(ln, "bad symmetry_plane comment".into()))?;
                if v.len() != 4 {
                    return Err(err(ln, "symmetry_plane needs 4 numbers".into()));
                }
                plane = Some(
                    SymmetryPlane::new([v[0], v[1], v[2]], v[3]).map_err(|e| err(ln, e.to_string()))?,
                );
            }
            ["comment", "keypoint", k] => {
                keypoints.push(k.parse::<usize>().map_err(|_| err(ln, format!("bad keypoint index '{k}'")))?);
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                n_vertices = Some(n.parse().map_err(|_| err(ln, format!("bad vertex count '{n}'")))?);
                in_vertex = true;
            }
            ["element", name, n] => {
                in_vertex = false;
                let count: usize = n.parse().map_err(|_| err(ln, format!("bad element count '{n}'")))?;
                if *name == "face" && count > 0 {
                    return Err(err(ln, "meshes with faces are not supported".into()));
                }
                if count > 0 {
                    return Err(err(ln, format!("unsupported element '{name}'")));
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(err(ln, "list properties on vertices are not supported".into()));
            }
            ["property", _ty, name] if in_vertex => {
                let f = match *name {
                    "x" => Field::X,
                    "y" => Field::Y,
                    "z" => Field::Z,
                    "part" => Field::Part,
                    "corr" => Field::Corr,
                    other => {
                        log::warn!("{}: skipping unknown vertex property '{other}'", path.display());
                        Field::Skip
                    }
                };
                fields.push(f);
            }
            ["property", ..] => {}
            _ => return Err(err(ln, format!("unrecognized header line '{line}'"))),
        }
    }
    if !header_done {
        return Err(err(0, "missing end_header".into()));
    }
    let n = n_vertices.ok_or_else(|| err(0, "no vertex element".into()))?;
    for f in [Field::X, Field::Y, Field::Z] {
        if !fields.contains(&f) {
            return Err(err(0, "vertex element lacks x, y or z".into()));
        }
    }
    let has_part = fields.contains(&Field::Part);
    let has_corr = fields.contains(&Field::Corr);
    let mut points = Vec::with_capacity(n);
    let mut parts = Vec::new();
    let mut corrs = Vec::new();
    let mut last_line = 0;
    for _ in 0..n {
        let (ln, line) = loop {
            match lines.next() {
                Some((_, "")) => continue,
                Some(x) => break x,
                None => return Err(err(last_line + 1, format!("expected {n} vertices, file ended"))),
            }
        };
        last_line = ln;
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != fields.len() {
            return Err(err(ln, format!("expected {} values, found {}", fields.len(), tok.len())));
        }
        let mut p = [0.0f32; 3];
        for (f, t) in fields.iter().zip(&tok) {
            let num = || t.parse::<f32>().map_err(|_| err(ln, format!("bad number '{t}'")));
            let int = || t.parse::<i32>().map_err(|_| err(ln, format!("bad integer '{t}'")));
            match f {
                Field::X => p[0] = num()?,
                Field::Y => p[1] = num()?,
                Field::Z => p[2] = num()?,
                Field::Part => parts.push(int()?),
                Field::Corr => corrs.push(int()?),
                Field::Skip => {}
            }
        }
        if p.iter().any(|c| !c.is_finite()) {
            return Err(err(ln, "non-finite coordinate".into()));
        }
        points.push(p);
    }
    if let Some((ln, _)) = lines.find(|(_, l)| !l.is_empty()) {
        return Err(err(ln, "trailing data after vertices".into()));
    }
    if let Some(&k) = keypoints.iter().find(|&&k| k >= n) {
        return Err(err(0, format!("keypoint index {k} out of range {n}")));
    }
    Ok(PointCloud {
        points,
        part_labels: has_part.then_some(parts),
        gt_keypoints: (!keypoints.is_empty()).then_some(keypoints),
        correspondence_ids: has_corr.then_some(corrs),
        symmetry_plane: plane,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PointCloud {
        PointCloud {
            points: vec![[0.1, -0.25, 1.0 / 3.0], [1e-7, 2.5, -0.0]],
            part_labels: Some(vec![0, 3]),
            gt_keypoints: Some(vec![1]),
            correspondence_ids: Some(vec![-1, 17]),
            symmetry_plane: Some(SymmetryPlane::yz()),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let pc = sample();
        let back = parse_ply(&to_ply_string(&pc), Path::new("mem")).unwrap();
        assert_eq!(back, pc);
    }

    #[test]
    fn unknown_property_is_skipped() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float nx\n\
                    property float y\nproperty float z\nend_header\n1 9 2 3\n";
        let pc = parse_ply(text, Path::new("mem")).unwrap();
        assert_eq!(pc.points, vec![[1.0, 2.0, 3.0]]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n\
                    property float z\nend_header\n1 2 3\n1 oops 3\n";
        match parse_ply(text, Path::new("m.ply")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 9),
            other => panic!("{other:?}"),
        }
        let faces = "ply\nformat ascii 1.0\nelement vertex 0\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n";
        assert!(parse_ply(faces, Path::new("m.ply")).unwrap_err().to_string().contains("faces"));
    }
}
