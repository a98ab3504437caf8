use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::losses::{critic_loss, generator_gan_loss, l1_sparsity, recon_loss, sym_loss_weighted};
use crate::autograd::{checkpoint, Adam, AdamConfig, ParamStore, Tape, Tensor};
use crate::config::RunConfig;
use crate::datagen::downsample;
use crate::error::{Error, Result};
use crate::geometry::{symmetric_pairs, PointCloud};
use crate::model::{cloud_features, decode, encode, global_feature, heads, sample_beta_with, CloudFeatures, Model};

/// A training cloud with its cached network inputs and mirror pairs.
pub struct Prepared {
    pub cloud: PointCloud,
    pub features: CloudFeatures,
    pub pairs: Vec<(usize, usize)>,
}

/// Subsamples to the configured size and computes descriptors and mirror pairs.
pub fn prepare(clouds: &[PointCloud], cfg: &RunConfig) -> Result<Vec<Prepared>> {
    clouds
        .iter()
        .enumerate()
        .map(|(i, pc)| {
            let n = cfg.train.train_points;
            let cloud = if pc.len() == n {
                pc.clone()
            } else if pc.len() > n {
                downsample(pc, n, cfg.train.seed ^ (i as u64).wrapping_mul(0x2545_f491_4f6c_dd1d))?
            } else {
                return Err(Error::Training(format!(
                    "cloud {i} has {} points, fewer than train_points = {n}",
                    pc.len()
                )));
            };
            cloud.validate()?;
            let features = cloud_features(&cloud, &cfg.model);
            let pairs = match &cloud.symmetry_plane {
                Some(plane) => symmetric_pairs(&cloud, plane, cfg.train.sym_tol),
                None => Vec::new(),
            };
            Ok(Prepared {
                cloud,
                features,
                pairs,
            })
        })
        .collect()
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub l_recon: f32,
    /// Generator adversarial loss, or the L1 sparsity term when the GAN is ablated.
    pub l_gan_g: f32,
    pub l_gan_d: f32,
    pub l_sym: f32,
    pub grad_penalty: f32,
    pub l_total: f32,
}

pub fn log_header(no_gan: bool) -> [&'static str; 8] {
    let g = if no_gan { "l_l1" } else { "l_gan_g" };
    ["epoch", "step", "l_recon", g, "l_gan_d", "l_sym", "grad_penalty", "l_total"]
}

pub fn log_csv(rows: &[LogRow], no_gan: bool) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(log_header(no_gan))?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.step.to_string(),
            r.l_recon.to_string(),
            r.l_gan_g.to_string(),
            r.l_gan_d.to_string(),
            r.l_sym.to_string(),
            r.grad_penalty.to_string(),
            r.l_total.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Training(e.to_string()))
}

/// Where epoch checkpoints and the log go.
#[derive(Clone, Debug)]
pub struct OutputDir {
    pub dir: PathBuf,
}

impl OutputDir {
    pub fn model_path(&self) -> PathBuf {
        self.dir.join("model.ukpf")
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join("log.csv")
    }

    /// Optimizer moments, same record layout as the checkpoint.
    pub fn adam_path(&self) -> PathBuf {
        self.dir.join("model.ukpf.adam")
    }
}

/// Both optimizer states in one store, prefixed `g.` (generator) and `d.` (critic).
pub fn optimizer_state(gen: &Adam, critic: &Adam) -> ParamStore {
    let mut s = ParamStore::new();
    for (prefix, opt) in [("g.", gen), ("d.", critic)] {
        for (n, t) in opt.to_store().iter() {
            s.insert(format!("{prefix}{n}"), t.clone());
        }
    }
    s
}

/// Splits a store written by [`optimizer_state`].
pub fn restore_optimizers(cfg: AdamConfig, store: &ParamStore) -> Result<(Adam, Adam)> {
    let part = |prefix: &str| {
        let mut s = ParamStore::new();
        for (n, t) in store.iter() {
            if let Some(rest) = n.strip_prefix(prefix) {
                s.insert(rest, t.clone());
            }
        }
        Adam::from_store(cfg, &s)
    };
    Ok((part("g.")?, part("d.")?))
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogRow>,
}

impl TrainOutcome {
    /// Mean reconstruction loss of each epoch, in order.
    pub fn epoch_recon(&self) -> Vec<f32> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for r in &self.log {
            if out.len() < r.epoch {
                out.resize(r.epoch, (0.0, 0));
            }
            out[r.epoch - 1].0 += f64::from(r.l_recon);
            out[r.epoch - 1].1 += 1;
        }
        out.into_iter().map(|(s, c)| (s / c.max(1) as f64) as f32).collect()
    }
}

/// Alternating adversarial training. When `out` is given, the checkpoint and
/// log are rewritten after every epoch.
pub fn train(clouds: &[PointCloud], cfg: &RunConfig, out: Option<&OutputDir>) -> Result<TrainOutcome> {
    if clouds.is_empty() {
        return Err(Error::Training("training set is empty".into()));
    }
    cfg.validate()?;
    let data = prepare(clouds, cfg)?;
    train_prepared(&data, cfg, out)
}

pub fn train_prepared(data: &[Prepared], cfg: &RunConfig, out: Option<&OutputDir>) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Training("training set is empty".into()));
    }
    cfg.validate()?;
    let t = &cfg.train;
    let w = cfg.weights;
    let mcfg = &cfg.model;
    let mut model = Model::new(cfg.clone(), t.seed)?;
    let adam_cfg = AdamConfig {
        lr: t.lr,
        beta1: t.adam_beta1,
        beta2: t.adam_beta2,
        eps: t.adam_eps,
    };
    let mut opt_g = Adam::new(adam_cfg);
    let mut opt_d = Adam::new(adam_cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed.wrapping_add(1));
    let use_sym = !t.no_sym && w.beta3 > 0.0;
    let mut log = Vec::new();
    let mut step = 0usize;
    if let Some(o) = out {
        std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
    }

    for epoch in 1..=t.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(t.batch_size) {
            step += 1;
            let ctx = |e: Error| Error::Training(format!("epoch {epoch}, step {step}: {e}"));
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &data[i]).collect();
            let b = batch.len();
            let n = batch[0].features.n;
            let feats: Vec<&CloudFeatures> = batch.iter().map(|p| &p.features).collect();

            let tape = Tape::new();
            let gp = model.generator.bind(&tape);
            let f = encode(&tape, &gp, mcfg, &feats).map_err(ctx)?;
            let hs = heads(&tape, &gp, mcfg, f).map_err(ctx)?;

            // Critic updates against the current fake saliencies.
            let (mut l_d, mut pen) = (0.0f32, 0.0f32);
            if !t.no_gan {
                let fake = (*tape.value(hs.phi)).clone().reshape(vec![b, n]).map_err(ctx)?;
                for _ in 0..t.critic_steps {
                    let real = sample_beta_with(&cfg.prior, b * n, &mut rng)?;
                    let real = Tensor::new(vec![b, n], real)?;
                    let eps: Vec<f32> = (0..b).map(|_| rng.random::<f32>()).collect();
                    let ct = Tape::new();
                    let cp = model.critic.bind(&ct);
                    let terms = critic_loss(&ct, &cp, mcfg, &real, &fake, &eps, w.lambda_gp).map_err(ctx)?;
                    let grads = ct.backward(terms.total).map_err(ctx)?;
                    opt_d.step(&mut model.critic, &cp.gradients(&ct, &grads)).map_err(ctx)?;
                    l_d = ct.value(terms.total).item()?;
                    pen = terms.penalty;
                }
            }

            let g = global_feature(&tape, mcfg, &hs, b).map_err(ctx)?;
            let pred = decode(&tape, &gp, mcfg, g).map_err(ctx)?;
            let mut target = Vec::with_capacity(b * n * 3);
            for p in &batch {
                target.extend(p.cloud.points.iter().flatten());
            }
            let target = tape.constant(Tensor::new(vec![b, n, 3], target)?);
            let l_recon = recon_loss(&tape, pred, target).map_err(ctx)?;

            let l_gan = if t.no_gan {
                l1_sparsity(&tape, hs.phi)
            } else {
                let cp = model.critic.bind_frozen(&tape);
                generator_gan_loss(&tape, &cp, mcfg, hs.phi, b).map_err(ctx)?
            };

            let l_sym = if use_sym {
                let mut pairs = Vec::new();
                let mut weights = Vec::new();
                let with_pairs = batch.iter().filter(|p| !p.pairs.is_empty()).count().max(1);
                for (k, p) in batch.iter().enumerate() {
                    let wk = 1.0 / (p.pairs.len().max(1) * with_pairs) as f32;
                    for &(i, j) in &p.pairs {
                        pairs.push((k * n + i, k * n + j));
                        weights.push(wk);
                    }
                }
                sym_loss_weighted(&tape, hs.phi, hs.h, &pairs, &weights).map_err(ctx)?
            } else {
                tape.constant(Tensor::scalar(0.0))
            };

            let total = tape.add(
                tape.add(tape.scale(l_recon, w.beta1), tape.scale(l_gan, w.beta2))?,
                tape.scale(l_sym, w.beta3),
            )?;
            let row = LogRow {
                epoch,
                step,
                l_recon: tape.value(l_recon).item()?,
                l_gan_g: tape.value(l_gan).item()?,
                l_gan_d: l_d,
                l_sym: tape.value(l_sym).item()?,
                grad_penalty: pen,
                l_total: tape.value(total).item()?,
            };
            if !row.l_total.is_finite() {
                return Err(ctx(Error::Training(format!("non-finite loss {row:?}"))));
            }
            let grads = tape.backward(total).map_err(ctx)?;
            opt_g.step(&mut model.generator, &gp.gradients(&tape, &grads)).map_err(ctx)?;
            log.push(row);
        }
        let last = log.last().copied();
        if let Some(r) = last {
            log::info!(
                "epoch {epoch}: recon {:.5} gan {:.4} critic {:.4} sym {:.4}",
                r.l_recon,
                r.l_gan_g,
                r.l_gan_d,
                r.l_sym
            );
        }
        if let Some(o) = out {
            model.save(&o.model_path())?;
            checkpoint::save(&o.adam_path(), &optimizer_state(&opt_g, &opt_d))?;
            checkpoint::write_atomic(&o.log_path(), &log_csv(&log, t.no_gan)?)?;
        }
    }
    Ok(TrainOutcome { model, log })
}

/// Saliency, logits and embeddings for one cloud, without gradients.
pub fn infer(model: &Model, features: &CloudFeatures) -> Result<Inference> {
    let tape = Tape::new();
    let p = model.generator.bind_frozen(&tape);
    let cfg = &model.config.model;
    let f = encode(&tape, &p, cfg, &[features])?;
    let hs = heads(&tape, &p, cfg, f)?;
    Ok(Inference {
        phi: tape.value(hs.phi).data().to_vec(),
        logits: tape.value(hs.logits).data().to_vec(),
        embeddings: (*tape.value(hs.h)).clone(),
    })
}

/// Per-point network outputs for one cloud.
#[derive(Clone, Debug)]
pub struct Inference {
    pub phi: Vec<f32>,
    pub logits: Vec<f32>,
    /// `[F, N]` unit columns.
    pub embeddings: Tensor,
}

/// Checkpoint path convention used by [`OutputDir`].
pub fn default_model_path(dir: &Path) -> PathBuf {
    OutputDir { dir: dir.to_path_buf() }.model_path()
}
