use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use kpgen_core::autograd::checkpoint::write_atomic;
use kpgen_core::config::RunConfig;
use kpgen_core::datagen::{downsample, generate_corpus, read_dataset, write_dataset, CorpusSpec, Family, Sample, Split};
use kpgen_core::geometry::ply::read_ply;
use kpgen_core::geometry::PointCloud;
use kpgen_core::metrics::*;
use kpgen_core::model::Model;
use kpgen_core::train::{train, OutputDir};

use crate::heatmap::colored_ply;
use crate::{Command, DetectArgs, EvalArgs, GenDataArgs, HeatmapArgs, Preset, Task, TrainArgs};

/// A failed command: bad invocation (exit 2) or a runtime failure (exit 1).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(kpgen_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}\n\nFor more information, try '--help'."),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<kpgen_core::Error> for CliError {
    fn from(e: kpgen_core::Error) -> Self {
        CliError::Runtime(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Detect(a) => detect_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::ExportHeatmap(a) => heatmap_cmd(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| {
        CliError::Runtime(kpgen_core::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    if a.per_family == 0 {
        return Err(CliError::Usage("--per-family must be at least 1".into()));
    }
    let spec = CorpusSpec {
        families: a.families,
        per_family: a.per_family,
        n_points: a.points,
        jitter: a.jitter,
        seed: a.seed,
    };
    let corpus = generate_corpus(&spec)?;
    create_dir(&a.out)?;
    write_dataset(&a.out, &corpus)?;
    let count = |s| corpus.iter().filter(|x| x.split == s).count();
    println!(
        "wrote {} clouds ({} train, {} val, {} test) to {}",
        corpus.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        a.out.display()
    );
    Ok(())
}

/// Preset, then config file, then flags.
pub fn resolve_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match a.preset {
        Preset::Full => RunConfig::default(),
        Preset::Desk => RunConfig::desk(),
        Preset::Tiny => RunConfig::tiny(),
    };
    let mut set: HashSet<String> = HashSet::new();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| kpgen_core::Error::Io {
            path: path.clone(),
            source: e,
        })?;
        set.extend(cfg.apply_text(&text, path)?);
    }
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got '{o}'")))?;
        cfg.set(k.trim(), v).map_err(|e| CliError::Usage(e.to_string()))?;
        set.insert(k.trim().to_string());
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
        set.insert("epochs".into());
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
        set.insert("seed".into());
    }
    if let Some(ab) = a.ablate {
        cfg.apply_ablation(ab.key())?;
    }
    for (k, v) in cfg.entries() {
        if !set.contains(k) {
            log::info!("config key '{k}' not given; using default {v}");
        }
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn select(samples: Vec<Sample>, split: Option<Split>, families: &[Family]) -> Vec<Sample> {
    samples
        .into_iter()
        .filter(|s| split.is_none_or(|sp| s.split == sp))
        .filter(|s| families.is_empty() || families.contains(&s.family))
        .collect()
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a)?;
    let samples = select(read_dataset(&a.data)?, Some(Split::Train), &a.families);
    if samples.is_empty() {
        return Err(CliError::Usage(format!("no training clouds in {}", a.data.display())));
    }
    create_dir(&a.out)?;
    let out = OutputDir { dir: a.out.clone() };
    let clouds: Vec<PointCloud> = samples.into_iter().map(|s| s.cloud).collect();
    log::info!("training on {} clouds for {} epochs", clouds.len(), cfg.train.epochs);
    let outcome = train(&clouds, &cfg, Some(&out))?;
    if let Some(last) = outcome.log.last() {
        println!(
            "epoch {} step {}: recon {:.6} total {:.6}; model written to {}",
            last.epoch,
            last.step,
            last.l_recon,
            last.l_total,
            out.model_path().display()
        );
    }
    Ok(())
}

fn cloud_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn detect_cmd(a: DetectArgs) -> Result<()> {
    let model = Model::load(&a.model)?;
    let pc = read_ply(&a.cloud)?;
    let opts = DetectOptions {
        nms_radius: a.nms_radius,
        threshold: a.threshold,
        top_k: a.top_k,
        with_embeddings: a.embeddings.is_some(),
    };
    let r = detect(&model, &pc, &cloud_id(&a.cloud), &opts)?;
    if let (Some(path), Some(e)) = (&a.embeddings, &r.embeddings) {
        write_atomic(path, &encode_embeddings(e)?)?;
    }
    match &a.out {
        Some(path) => write_keypoints(path, &r)?,
        None => {
            let mut out = std::io::stdout().lock();
            let _ = out.write_all(keypoints_to_string(&r).as_bytes());
        }
    }
    log::info!("{} keypoints on {}", r.len(), a.cloud.display());
    Ok(())
}

fn heatmap_cmd(a: HeatmapArgs) -> Result<()> {
    let model = Model::load(&a.model)?;
    let pc = read_ply(&a.cloud)?;
    let scored = score_cloud(&model, &pc)?;
    write_atomic(&a.out, colored_ply(&pc, &scored.phi).as_bytes())?;
    Ok(())
}

/// Either a trained model or the ground-truth annotations.
enum Detector {
    Model(Box<Model>),
    Oracle,
}

impl Detector {
    fn gt(pc: &PointCloud) -> Result<Vec<usize>> {
        pc.gt_keypoints
            .clone()
            .ok_or_else(|| CliError::Runtime(kpgen_core::Error::Metric("cloud has no ground-truth keypoints".into())))
    }

    /// Thresholded detection.
    fn detect(&self, pc: &PointCloud, id: &str, a: &EvalArgs) -> Result<DetectionResult> {
        match self {
            Detector::Model(m) => {
                let opts = DetectOptions {
                    nms_radius: a.nms_radius,
                    threshold: a.threshold,
                    ..DetectOptions::default()
                };
                Ok(detect(m, pc, id, &opts)?)
            }
            Detector::Oracle => {
                let idx = Self::gt(pc)?;
                let scores = vec![1.0; idx.len()];
                Ok(DetectionResult::new(id, idx, scores))
            }
        }
    }

    /// The `k` best-ranked keypoints regardless of threshold.
    fn top_k(&self, pc: &PointCloud, k: usize, nms_radius: f32) -> kpgen_core::Result<Vec<usize>> {
        match self {
            Detector::Model(m) => {
                let s = score_cloud(m, pc)?;
                top_k_by_score(&pc.points, &s.phi, Some(&s.logits), &s.valid, k, nms_radius)
            }
            Detector::Oracle => {
                let gt = pc
                    .gt_keypoints
                    .clone()
                    .ok_or_else(|| kpgen_core::Error::Metric("cloud has no ground-truth keypoints".into()))?;
                Ok(gt.into_iter().take(k).collect())
            }
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let split = Split::parse(&a.split).map_err(|e| CliError::Usage(e.to_string()))?;
    let detector = match &a.model {
        Some(p) => Detector::Model(Box::new(Model::load(p)?)),
        None => Detector::Oracle,
    };
    let samples = select(read_dataset(&a.data)?, Some(split), &a.families);
    if samples.is_empty() {
        return Err(CliError::Usage(format!("no {} clouds in {}", a.split, a.data.display())));
    }
    let mut by_family: BTreeMap<Family, Vec<&Sample>> = BTreeMap::new();
    for s in &samples {
        by_family.entry(s.family).or_default().push(s);
    }
    let mut rows = Vec::new();
    let metric;
    let mut family_values = Vec::new();
    match a.task {
        Task::Part => {
            metric = "mean_correspondence_ratio";
            for (fam, list) in &by_family {
                if list.iter().any(|s| s.cloud.part_labels.is_none()) {
                    return Err(CliError::Runtime(kpgen_core::Error::Metric(format!(
                        "{fam}: part evaluation needs part labels on every cloud"
                    ))));
                }
                let results = list
                    .iter()
                    .map(|s| detector.detect(&s.cloud, &s.id, &a))
                    .collect::<Result<Vec<_>>>()?;
                let clouds: Vec<PointCloud> = list.iter().map(|s| s.cloud.clone()).collect();
                let v = mean_correspondence_ratio(&results, &clouds, a.k, a.seed)?;
                rows.push(ReportRow::new(metric, fam.name(), v));
                family_values.push(v);
            }
        }
        Task::Miou => {
            metric = "miou";
            for (fam, list) in &by_family {
                let mut curves = Vec::new();
                for s in list {
                    let gt = Detector::gt(&s.cloud)?;
                    let det = detector.detect(&s.cloud, &s.id, &a)?;
                    curves.push(miou_curve(&det.keypoint_indices, &gt, &s.cloud, &MIOU_THRESHOLDS)?);
                }
                for (t, thr) in MIOU_THRESHOLDS.iter().enumerate() {
                    let v = mean(&curves.iter().map(|c| c[t]).collect::<Vec<_>>());
                    rows.push(ReportRow::new(&format!("miou@{thr}"), fam.name(), v));
                }
                family_values.push(mean(&curves.iter().map(|c| c[c.len() - 1]).collect::<Vec<_>>()));
            }
        }
        Task::Repeat => {
            metric = "repeatability";
            for (fam, list) in &by_family {
                let mut vals = Vec::new();
                for s in list {
                    let v = rotation_repeatability(
                        |pc| detector.top_k(pc, a.n_keypoints, a.nms_radius),
                        &s.cloud,
                        a.n_keypoints,
                        a.dist_threshold,
                        a.rotations,
                        a.seed,
                    )?;
                    vals.push(v);
                }
                rows.push(ReportRow::new(metric, fam.name(), mean(&vals)));
                family_values.push(mean(&vals));
            }
        }
        Task::Corr => {
            metric = if a.dice { "correspondence_dice" } else { "correspondence_iou" };
            for (fam, list) in &by_family {
                let mut vals = Vec::new();
                for s in list {
                    let low = downsample(&s.cloud, a.points_low, a.seed)?;
                    let (Some(ca), Some(cb)) = (&s.cloud.correspondence_ids, &low.correspondence_ids) else {
                        return Err(CliError::Runtime(kpgen_core::Error::Metric(format!(
                            "{}: corr evaluation needs correspondence ids",
                            s.id
                        ))));
                    };
                    let pick = |pc: &PointCloud| -> Result<DetectionResult> {
                        let idx = detector.top_k(pc, a.n_keypoints, a.nms_radius)?;
                        let n = idx.len();
                        Ok(DetectionResult::new(s.id.clone(), idx, vec![1.0; n]))
                    };
                    vals.push(correspondence_iou(&pick(&s.cloud)?, ca, &pick(&low)?, cb, a.dice)?);
                }
                rows.push(ReportRow::new(metric, fam.name(), mean(&vals)));
                family_values.push(mean(&vals));
            }
        }
    }
    let summary_metric = if a.task == Task::Miou { "miou@0.1" } else { metric };
    let summary = mean(&family_values);
    rows.push(ReportRow::new(summary_metric, "all", summary));
    write_report(&a.out, &rows)?;
    println!("{summary_metric},all,{summary}");
    Ok(())
}
