//! File-level run configuration. Every key is optional; command-line flags
//! override whatever the file sets.

use std::path::Path;

use serde::{Deserialize, Serialize};
use skinsplat::datagen::{ClipConfig, OracleNoise};
use skinsplat::optim::{load_config, AvatarFitConfig, MotionFitConfig, DEFAULT_WINDOW};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 lets the pool pick.
    pub threads: usize,
    pub clip: ClipConfig,
    pub motion: MotionFitConfig,
    pub avatar: AvatarFitConfig,
    pub oracle: OracleNoise,
    pub window: usize,
    pub stride: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 0,
            clip: ClipConfig::default(),
            motion: MotionFitConfig::default(),
            avatar: AvatarFitConfig::default(),
            oracle: OracleNoise::default(),
            window: DEFAULT_WINDOW,
            stride: DEFAULT_WINDOW / 2,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> skinsplat::Result<Self> {
        match path {
            Some(p) => load_config(p),
            None => Ok(RunConfig::default()),
        }
    }
}
