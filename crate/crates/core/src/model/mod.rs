//! The keypoint network: descriptor encoder, saliency and embedding heads,
//! salient-feature distillation, tree decoder and the saliency critic.

mod beta;
mod features;
mod network;

use std::path::{Path, PathBuf};

pub use beta::{sample_beta_prior, sample_beta_with};
pub use features::{cloud_features, CloudFeatures};
pub use network::{
    critic_score, decode, distill, distill_soft, encode, global_feature, heads, init_critic,
    init_generator, HeadOutputs,
};

use crate::autograd::{checkpoint, ParamStore};
use crate::config::RunConfig;
use crate::error::{Error, Result};

/// A trained or freshly initialized model with the configuration that shapes it.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub generator: ParamStore,
    pub critic: ParamStore,
}

impl Model {
    pub fn new(config: RunConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Model {
            generator: init_generator(&config.model, seed)?,
            critic: init_critic(&config.model, seed)?,
            config,
        })
    }

    /// Sidecar path holding the configuration of the checkpoint at `path`.
    pub fn config_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".cfg");
        PathBuf::from(s)
    }

    /// Writes the parameter file and its configuration sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut all = self.generator.clone();
        for (n, t) in self.critic.iter() {
            all.insert(n, t.clone());
        }
        checkpoint::write_atomic(&Self::config_path(path), self.config.to_text().as_bytes())?;
        checkpoint::save(path, &all)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg_path = Self::config_path(path);
        let config = RunConfig::load(&cfg_path)?;
        config.validate()?;
        let stored = checkpoint::load(path)?;
        let mut model = Model::new(config, 0)?;
        for store in [&mut model.generator, &mut model.critic] {
            store.check_compatible(&stored).map_err(|e| {
                Error::Checkpoint(format!("{} does not match its configuration: {e}", path.display()))
            })?;
            let names: Vec<String> = store.names().to_vec();
            for n in names {
                store.insert(n.clone(), stored.require(&n)?.clone());
            }
        }
        Ok(model)
    }
}
