//! Run configuration: model hyperparameters, training schedule, loss weights
//! and the Beta prior, read from `key = value` files.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Network hyperparameters. Everything needed to rebuild parameter shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// SDV grid edge (voxels per axis).
    pub grid: usize,
    pub lrf_radius: f32,
    pub enc_channels: Vec<usize>,
    pub enc_strides: Vec<usize>,
    pub enc_kernel: usize,
    pub enc_padding: usize,
    /// Per-point MLP widths used instead of the SDV encoder when `use_lrf` is off.
    pub raw_channels: Vec<usize>,
    pub trunk: Vec<usize>,
    /// Embedding dimension F.
    pub feat_dim: usize,
    /// Decoder output point count; must be `root_fanout · fanout^k`.
    pub n_out: usize,
    pub dec_hidden: Vec<usize>,
    pub node_dim: usize,
    pub root_fanout: usize,
    pub fanout: usize,
    pub critic_channels: Vec<usize>,
    pub leaky_slope: f32,
    pub use_lrf: bool,
    /// Tempered average pooling instead of the coordinate-wise max.
    pub soft_distill: bool,
    /// Temperature of the tempered average.
    pub gamma: f32,
    /// Initial saliency bias. The default is the logit of the prior mean
    /// `α/(α+β) = 1/6`, so training starts from sparse saliency.
    pub sal_bias: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            grid: 16,
            lrf_radius: 0.3,
            enc_channels: vec![32, 32, 64, 64, 128, 128, 128],
            enc_strides: vec![1, 2, 1, 2, 1, 2, 1],
            enc_kernel: 3,
            enc_padding: 1,
            raw_channels: vec![64, 128],
            trunk: vec![512, 256],
            feat_dim: 128,
            n_out: 2048,
            dec_hidden: vec![256, 64],
            node_dim: 8,
            root_fanout: 4,
            fanout: 8,
            critic_channels: vec![512, 256, 128, 64, 1],
            leaky_slope: 0.2,
            use_lrf: true,
            soft_distill: false,
            gamma: 1.0,
            sal_bias: -1.609_438,
        }
    }
}

impl ModelConfig {
    /// Number of decoder MLP levels (root included).
    pub fn decoder_levels(&self) -> Result<usize> {
        let mut n = self.root_fanout;
        let mut levels = 1;
        while n < self.n_out {
            n *= self.fanout;
            levels += 1;
        }
        if n != self.n_out || self.root_fanout == 0 || self.fanout < 2 {
            return Err(Error::Config(format!(
                "n_out = {} is not {} x {}^k",
                self.n_out, self.root_fanout, self.fanout
            )));
        }
        Ok(levels)
    }

    /// Length of the per-point feature the trunk consumes.
    pub fn point_feature_dim(&self) -> usize {
        let chans = if self.use_lrf { &self.enc_channels } else { &self.raw_channels };
        *chans.last().unwrap_or(&0)
    }

    /// Length of the global feature fed to the decoder.
    pub fn global_dim(&self) -> usize {
        if self.soft_distill {
            self.feat_dim
        } else {
            2 * self.feat_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.grid == 0 || !(self.lrf_radius > 0.0) {
            return bad("grid and lrf_radius must be positive".into());
        }
        if self.enc_channels.is_empty() || self.enc_channels.len() != self.enc_strides.len() {
            return bad("enc_channels and enc_strides must be non-empty and equally long".into());
        }
        if self.enc_kernel == 0 || self.enc_strides.contains(&0) {
            return bad("encoder kernel and strides must be positive".into());
        }
        let mut side = self.grid;
        for &s in &self.enc_strides {
            let span = side + 2 * self.enc_padding;
            if span < self.enc_kernel {
                return bad(format!("encoder shrinks the {}^3 grid to nothing", self.grid));
            }
            side = (span - self.enc_kernel) / s + 1;
        }
        for (name, v) in [
            ("raw_channels", &self.raw_channels),
            ("trunk", &self.trunk),
            ("dec_hidden", &self.dec_hidden),
            ("critic_channels", &self.critic_channels),
        ] {
            if v.is_empty() || v.contains(&0) {
                return bad(format!("{name} must be a non-empty list of positive widths"));
            }
        }
        if self.critic_channels.last() != Some(&1) {
            return bad("the last critic width must be 1".into());
        }
        if self.feat_dim == 0 || self.node_dim == 0 {
            return bad("feat_dim and node_dim must be positive".into());
        }
        if !(self.gamma >= 1.0) {
            return bad(format!("distillation gamma must be >= 1, got {}", self.gamma));
        }
        self.decoder_levels()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub beta1: f32,
    pub beta2: f32,
    pub beta3: f32,
    pub lambda_gp: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta1: 10.0,
            beta2: 1.0,
            beta3: 0.1,
            lambda_gp: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaPrior {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for BetaPrior {
    fn default() -> Self {
        BetaPrior {
            alpha: 0.01,
            beta: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    pub batch_size: usize,
    pub critic_steps: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Points per training cloud (clouds are subsampled to this size).
    pub train_points: usize,
    /// Mirror-match tolerance for symmetric pairs.
    pub sym_tol: f32,
    pub no_gan: bool,
    pub no_sym: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            critic_steps: 5,
            epochs: 100,
            seed: 0,
            train_points: 2048,
            sym_tol: 0.05,
            no_gan: false,
            no_sym: false,
        }
    }
}

/// Every tunable of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub prior: BetaPrior,
}

pub const ABLATIONS: [&str; 4] = ["no_gan", "no_distill", "no_lrf", "no_sym"];

impl RunConfig {
    /// A reduced configuration that trains in minutes on one core.
    pub fn desk() -> Self {
        let mut c = RunConfig::default();
        c.model.grid = 8;
        c.model.enc_channels = vec![8, 8, 16, 16, 32, 32, 32];
        c.model.raw_channels = vec![32, 32];
        c.model.trunk = vec![64, 64];
        c.model.feat_dim = 32;
        c.model.n_out = 256;
        c.model.dec_hidden = vec![64, 32];
        c.model.critic_channels = vec![64, 32, 16, 8, 1];
        c.train.train_points = 256;
        c.train.lr = 1e-3;
        c.train.epochs = 30;
        c.train.sym_tol = 0.08;
        c
    }

    /// Minimal widths for smoke runs: 4³ grids, 32-point clouds.
    pub fn tiny() -> Self {
        let mut c = RunConfig::default();
        c.model.grid = 4;
        c.model.enc_channels = vec![4; 7];
        c.model.raw_channels = vec![8];
        c.model.trunk = vec![16, 16];
        c.model.feat_dim = 8;
        c.model.n_out = 32;
        c.model.dec_hidden = vec![16, 8];
        c.model.critic_channels = vec![8, 4, 1];
        c.train.train_points = 32;
        c.train.batch_size = 2;
        c.train.critic_steps = 2;
        c.train.lr = 1e-3;
        c.train.epochs = 1;
        c.train.sym_tol = 0.2;
        c
    }

    pub fn apply_ablation(&mut self, name: &str) -> Result<()> {
        match name {
            "no_gan" => self.train.no_gan = true,
            "no_sym" => self.train.no_sym = true,
            "no_lrf" => self.model.use_lrf = false,
            "no_distill" => {
                self.model.soft_distill = true;
                self.model.gamma = 1.0;
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation '{other}' (expected one of {})",
                    ABLATIONS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.critic_steps == 0 {
            return Err(Error::Config("batch_size and critic_steps must be at least 1".into()));
        }
        if !(t.lr > 0.0) || t.train_points == 0 {
            return Err(Error::Config("lr and train_points must be positive".into()));
        }
        let w = &self.weights;
        if [w.beta1, w.beta2, w.beta3, w.lambda_gp].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.prior.alpha > 0.0 && self.prior.beta > 0.0) {
            return Err(Error::Config("Beta prior parameters must be positive".into()));
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("grid", m.grid.to_string()),
            ("lrf_radius", m.lrf_radius.to_string()),
            ("enc_channels", list(&m.enc_channels)),
            ("enc_strides", list(&m.enc_strides)),
            ("enc_kernel", m.enc_kernel.to_string()),
            ("enc_padding", m.enc_padding.to_string()),
            ("raw_channels", list(&m.raw_channels)),
            ("trunk", list(&m.trunk)),
            ("feat_dim", m.feat_dim.to_string()),
            ("n_out", m.n_out.to_string()),
            ("dec_hidden", list(&m.dec_hidden)),
            ("node_dim", m.node_dim.to_string()),
            ("root_fanout", m.root_fanout.to_string()),
            ("fanout", m.fanout.to_string()),
            ("critic_channels", list(&m.critic_channels)),
            ("leaky_slope", m.leaky_slope.to_string()),
            ("no_lrf", (!m.use_lrf).to_string()),
            ("no_distill", m.soft_distill.to_string()),
            ("gamma", m.gamma.to_string()),
            ("sal_bias", m.sal_bias.to_string()),
            ("lr", t.lr.to_string()),
            ("adam_beta1", t.adam_beta1.to_string()),
            ("adam_beta2", t.adam_beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("critic_steps", t.critic_steps.to_string()),
            ("epochs", t.epochs.to_string()),
            ("seed", t.seed.to_string()),
            ("train_points", t.train_points.to_string()),
            ("sym_tol", t.sym_tol.to_string()),
            ("no_gan", t.no_gan.to_string()),
            ("no_sym", t.no_sym.to_string()),
            ("beta1", self.weights.beta1.to_string()),
            ("beta2", self.weights.beta2.to_string()),
            ("beta3", self.weights.beta3.to_string()),
            ("lambda_gp", self.weights.lambda_gp.to_string()),
            ("alpha", self.prior.alpha.to_string()),
            ("beta", self.prior.beta.to_string()),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        RunConfig::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    /// Sets one key from its text form. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bad = || Error::Config(format!("invalid value '{v}' for key '{key}'"));
        let finite = |x: f64| if x.is_finite() { Ok(x) } else { Err(bad()) };
        let us = || v.parse::<usize>().map_err(|_| bad());
        let f = || v.parse::<f64>().map_err(|_| bad()).and_then(finite).map(|x| x as f32);
        let f64_ = || v.parse::<f64>().map_err(|_| bad()).and_then(finite);
        let b = || v.parse::<bool>().map_err(|_| bad());
        let list = || {
            v.split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad())
        };
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "grid" => m.grid = us()?,
            "lrf_radius" => m.lrf_radius = f()?,
            "enc_channels" => m.enc_channels = list()?,
            "enc_strides" => m.enc_strides = list()?,
            "enc_kernel" => m.enc_kernel = us()?,
            "enc_padding" => m.enc_padding = us()?,
            "raw_channels" => m.raw_channels = list()?,
            "trunk" => m.trunk = list()?,
            "feat_dim" => m.feat_dim = us()?,
            "n_out" => m.n_out = us()?,
            "dec_hidden" => m.dec_hidden = list()?,
            "node_dim" => m.node_dim = us()?,
            "root_fanout" => m.root_fanout = us()?,
            "fanout" => m.fanout = us()?,
            "critic_channels" => m.critic_channels = list()?,
            "leaky_slope" => m.leaky_slope = f()?,
            "no_lrf" => m.use_lrf = !b()?,
            "no_distill" => m.soft_distill = b()?,
            "gamma" => m.gamma = f()?,
            "sal_bias" => m.sal_bias = f()?,
            "lr" => t.lr = f()?,
            "adam_beta1" => t.adam_beta1 = f()?,
            "adam_beta2" => t.adam_beta2 = f()?,
            "adam_eps" => t.adam_eps = f()?,
            "batch_size" => t.batch_size = us()?,
            "critic_steps" => t.critic_steps = us()?,
            "epochs" => t.epochs = us()?,
            "seed" => t.seed = v.parse().map_err(|_| bad())?,
            "train_points" => t.train_points = us()?,
            "sym_tol" => t.sym_tol = f()?,
            "no_gan" => t.no_gan = b()?,
            "no_sym" => t.no_sym = b()?,
            "beta1" => self.weights.beta1 = f()?,
            "beta2" => self.weights.beta2 = f()?,
            "beta3" => self.weights.beta3 = f()?,
            "lambda_gp" => self.weights.lambda_gp = f()?,
            "alpha" => self.prior.alpha = f64_()?,
            "beta" => self.prior.beta = f64_()?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Applies `key = value` lines on top of `self`; returns the keys that were set.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<Vec<String>> {
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected 'key = value', found '{line}'"),
            })?;
            let k = k.trim();
            self.set(k, v).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            seen.push(k.to_string());
        }
        Ok(seen)
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text, path)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}
