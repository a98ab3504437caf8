//! Seeded synthetic shape corpus (rectangles, boxes, tables, chairs) and
//! dataset files.

mod dataset;
mod shapes;

pub use dataset::{
    downsample, generate_corpus, read_dataset, read_manifest, split_for, write_dataset, CorpusSpec,
    ManifestEntry, Sample, Split, MANIFEST,
};
pub use shapes::{generate, Family, ShapeSpec, CORR_CELL};
