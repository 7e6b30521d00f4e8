//! Run configuration read from TOML. Every section and field is optional.
//!
//! ```toml
//! seed = 7
//!
//! [pretext]
//! iterations = 2000
//! batch_size = 16
//! adam = { lr = 1e-3 }
//! arch = { patch_size = 16, train_patches = 4, channels = 12, conv_blocks = 4 }
//!
//! [gmm]
//! k = 5
//!
//! [binary]
//! gamma = 0.05
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binary::BinaryConfig;
use crate::error::Result;
use crate::gmm::GmmConfig;
use crate::pretext::PretextConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// When set, overrides the seed of every stage.
    pub seed: Option<u64>,
    pub pretext: PretextConfig,
    pub gmm: GmmConfig,
    pub binary: BinaryConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Config = toml::from_str(text)?;
        if let Some(seed) = cfg.seed {
            cfg.set_seed(seed);
        }
        cfg.pretext.arch.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.pretext.seed = seed;
        self.gmm.seed = seed;
        self.binary.seed = seed;
    }
}
