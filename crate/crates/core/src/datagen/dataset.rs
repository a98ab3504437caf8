use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::shapes::{generate, nearest_index, Family, ShapeSpec};
use crate::autograd::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::geometry::ply::{read_ply, write_ply};
use crate::geometry::PointCloud;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Generation(format!("unknown split '{other}'"))),
        }
    }
}

/// Split of item `i` among `n`: validation gets ⌊n/10⌋, test ⌊3n/20⌋, train the rest.
pub fn split_for(i: usize, n: usize) -> Split {
    let val = n / 10;
    let test = 3 * n / 20;
    let train = n - val - test;
    if i < train {
        Split::Train
    } else if i < train + val {
        Split::Val
    } else {
        Split::Test
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub family: Family,
    pub split: Split,
    pub cloud: PointCloud,
}

#[derive(Clone, Debug)]
pub struct CorpusSpec {
    pub families: Vec<Family>,
    pub per_family: usize,
    pub n_points: usize,
    pub jitter: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            families: Family::ALL.to_vec(),
            per_family: 84,
            n_points: 2048,
            jitter: 0.002,
            seed: 0,
        }
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generates every cloud of the corpus in memory.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for &family in &spec.families {
        for i in 0..spec.per_family {
            let seed = mix(spec.seed, family as u64 + 1, i as u64);
            let cloud = generate(&ShapeSpec::random(family, spec.n_points, spec.jitter, seed))?;
            out.push(Sample {
                id: format!("{family}_{i:04}"),
                family,
                split: split_for(i, spec.per_family),
                cloud,
            });
        }
    }
    Ok(out)
}

pub const MANIFEST: &str = "manifest.csv";

/// Writes `clouds/<id>.ply` per sample plus `manifest.csv` (id, family, split, path).
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    let clouds = dir.join("clouds");
    fs::create_dir_all(&clouds).map_err(|e| Error::io(&clouds, e))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "family", "split", "path"])?;
    for s in samples {
        let rel = format!("clouds/{}.ply", s.id);
        write_ply(&dir.join(&rel), &s.cloud)?;
        w.write_record([s.id.as_str(), s.family.name(), s.split.name(), rel.as_str()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Generation(e.to_string()))?;
    write_atomic(&dir.join(MANIFEST), &bytes)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub family: Family,
    pub split: Split,
    pub path: PathBuf,
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse_err = |msg: String| Error::Parse {
            path: path.clone(),
            line: i + 2,
            msg,
        };
        if rec.len() != 4 {
            return Err(parse_err(format!("expected 4 fields, found {}", rec.len())));
        }
        out.push(ManifestEntry {
            id: rec[0].to_string(),
            family: rec[1].parse().map_err(|e: Error| parse_err(e.to_string()))?,
            split: Split::parse(&rec[2]).map_err(|e| parse_err(e.to_string()))?,
            path: dir.join(&rec[3]),
        });
    }
    Ok(out)
}

/// Reads the manifest and every listed cloud.
pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    read_manifest(dir)?
        .into_iter()
        .map(|e| {
            Ok(Sample {
                cloud: read_ply(&e.path)?,
                id: e.id,
                family: e.family,
                split: e.split,
            })
        })
        .collect()
}

/// Uniform subsample of `m` points without replacement (in ascending index
/// order); keypoints are re-snapped to the nearest kept point.
pub fn downsample(pc: &PointCloud, m: usize, seed: u64) -> Result<PointCloud> {
    if m > pc.len() || m == 0 {
        return Err(Error::Geometry(format!("cannot keep {m} of {} points", pc.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, pc.len(), m).into_vec();
    idx.sort_unstable();
    let mut out = pc.select(&idx);
    if let Some(kp) = &pc.gt_keypoints {
        let mut snapped: Vec<usize> = kp.iter().map(|&k| nearest_index(&out.points, pc.points[k])).collect();
        snapped.dedup();
        out.gt_keypoints = Some(snapped);
    }
    Ok(out)
}
