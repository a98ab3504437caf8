use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autograd::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::geometry::{nms_with_tiebreak, Point, PointCloud};
use crate::model::{cloud_features, Model};
use crate::train::infer;

/// Detected keypoints of one cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionResult {
    pub cloud_id: String,
    pub keypoint_indices: Vec<usize>,
    /// Aligned with `keypoint_indices`, descending.
    pub scores: Vec<f32>,
    /// Row-major `N × F` per-point embeddings.
    pub embeddings: Option<Embeddings>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub n: usize,
    pub f: usize,
    pub data: Vec<f32>,
}

impl DetectionResult {
    pub fn new(cloud_id: impl Into<String>, keypoint_indices: Vec<usize>, scores: Vec<f32>) -> Self {
        DetectionResult {
            cloud_id: cloud_id.into(),
            keypoint_indices,
            scores,
            embeddings: None,
        }
    }

    pub fn len(&self) -> usize {
        self.keypoint_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoint_indices.is_empty()
    }

    /// Checks uniqueness, range and score order against a cloud of `n` points.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.scores.len() != self.keypoint_indices.len() {
            return Err(Error::Metric(format!(
                "{}: {} scores for {} keypoints",
                self.cloud_id,
                self.scores.len(),
                self.keypoint_indices.len()
            )));
        }
        let mut seen = vec![false; n];
        for &i in &self.keypoint_indices {
            if i >= n {
                return Err(Error::Metric(format!("{}: keypoint {i} outside cloud of {n}", self.cloud_id)));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Metric(format!("{}: keypoint {i} listed twice", self.cloud_id)));
            }
        }
        if self.scores.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Metric(format!("{}: scores are not descending", self.cloud_id)));
        }
        Ok(())
    }
}

/// NMS survivors among `valid` points, ranked by score (then `tiebreak`,
/// then lower index); the first `k` are returned.
pub fn top_k_by_score(
    points: &[Point],
    saliency: &[f32],
    tiebreak: Option<&[f32]>,
    valid: &[bool],
    k: usize,
    nms_radius: f32,
) -> Result<Vec<usize>> {
    if saliency.len() != points.len() || valid.len() != points.len() {
        return Err(Error::Metric(format!(
            "{} points, {} scores, {} validity flags",
            points.len(),
            saliency.len(),
            valid.len()
        )));
    }
    let kept = nms_with_tiebreak(points, saliency, tiebreak, nms_radius, f32::NEG_INFINITY, Some(valid));
    if kept.len() < k {
        return Err(Error::Metric(format!(
            "requested {k} keypoints but only {} candidates survive suppression",
            kept.len()
        )));
    }
    Ok(kept[..k].to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectOptions {
    pub nms_radius: f32,
    pub threshold: f32,
    pub top_k: Option<usize>,
    pub with_embeddings: bool,
}

impl Default for DetectOptions {
    fn default() -> Self {
        DetectOptions {
            nms_radius: 0.1,
            threshold: 0.5,
            top_k: None,
            with_embeddings: false,
        }
    }
}

/// Saliency, logits and validity for every point of `pc`.
pub struct Scored {
    pub phi: Vec<f32>,
    pub logits: Vec<f32>,
    pub valid: Vec<bool>,
    pub embeddings: Embeddings,
}

pub fn score_cloud(model: &Model, pc: &PointCloud) -> Result<Scored> {
    pc.validate()?;
    let feats = cloud_features(pc, &model.config.model);
    let inf = infer(model, &feats)?;
    let (f, n) = (inf.embeddings.shape()[0], inf.embeddings.shape()[1]);
    let src = inf.embeddings.data();
    let mut data = vec![0.0; n * f];
    for c in 0..f {
        for i in 0..n {
            data[i * f + c] = src[c * n + i];
        }
    }
    Ok(Scored {
        phi: inf.phi,
        logits: inf.logits,
        valid: feats.valid,
        embeddings: Embeddings { n, f, data },
    })
}

/// Thresholded NMS over a scored cloud. Points whose frame is degenerate are
/// never reported. With `top_k`, exactly `k` keypoints are returned or an
/// error names the shortfall.
pub fn select_keypoints(pc: &PointCloud, scored: &Scored, opts: &DetectOptions) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut kept = nms_with_tiebreak(
        &pc.points,
        &scored.phi,
        Some(&scored.logits),
        opts.nms_radius,
        opts.threshold,
        Some(&scored.valid),
    );
    if let Some(k) = opts.top_k {
        if kept.len() < k {
            return Err(Error::Metric(format!(
                "requested {k} keypoints but only {} pass threshold {} after suppression",
                kept.len(),
                opts.threshold
            )));
        }
        kept.truncate(k);
    }
    let scores = kept.iter().map(|&i| scored.phi[i]).collect();
    Ok((kept, scores))
}

pub fn detect(model: &Model, pc: &PointCloud, cloud_id: &str, opts: &DetectOptions) -> Result<DetectionResult> {
    let scored = score_cloud(model, pc)?;
    let (idx, scores) = select_keypoints(pc, &scored, opts)?;
    let mut r = DetectionResult::new(cloud_id, idx, scores);
    if opts.with_embeddings {
        r.embeddings = Some(scored.embeddings);
    }
    Ok(r)
}

/// `index score` lines, one keypoint per line.
pub fn keypoints_to_string(r: &DetectionResult) -> String {
    let mut s = String::new();
    for (i, sc) in r.keypoint_indices.iter().zip(&r.scores) {
        let _ = writeln!(s, "{i} {sc}");
    }
    s
}

pub fn write_keypoints(path: &Path, r: &DetectionResult) -> Result<()> {
    write_atomic(path, keypoints_to_string(r).as_bytes())
}

/// Reads an `index score` file; blank lines and `#` comments are skipped.
/// The cloud id is the file stem.
pub fn read_keypoints(path: &Path) -> Result<DetectionResult> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_keypoints(&text, &id, path)
}

pub fn parse_keypoints(text: &str, cloud_id: &str, path: &Path) -> Result<DetectionResult> {
    let mut idx = Vec::new();
    let mut scores = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: ln + 1,
            msg,
        };
        let mut it = line.split_whitespace();
        let i = it
            .next()
            .and_then(|t| t.parse::<usize>().ok())
            .ok_or_else(|| err(format!("bad index in '{line}'")))?;
        let s = match it.next() {
            Some(t) => t.parse::<f32>().map_err(|_| err(format!("bad score in '{line}'")))?,
            None => return Err(err("missing score".into())),
        };
        if it.next().is_some() {
            return Err(err(format!("trailing fields in '{line}'")));
        }
        idx.push(i);
        scores.push(s);
    }
    Ok(DetectionResult::new(cloud_id, idx, scores))
}

pub const EMBEDDING_MAGIC: &[u8; 4] = b"UKPE";

/// `UKPE`, u32 N, u32 F (little endian), then `N × F` f32 values.
pub fn encode_embeddings(e: &Embeddings) -> Result<Vec<u8>> {
    let n = u32::try_from(e.n).map_err(|_| Error::Metric("too many points for the embedding file".into()))?;
    let f = u32::try_from(e.f).map_err(|_| Error::Metric("embedding width too large".into()))?;
    let mut out = Vec::with_capacity(12 + e.data.len() * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&f.to_le_bytes());
    for v in &e.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<Embeddings> {
    let bad = |m: &str| Error::Metric(format!("embedding file: {m}"));
    if bytes.len() < 12 || &bytes[..4] != EMBEDDING_MAGIC {
        return Err(bad("missing UKPE header"));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != n * f * 4 {
        return Err(bad(&format!("expected {} payload bytes, found {}", n * f * 4, body.len())));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Embeddings { n, f, data })
}
