//! Run configuration: one TOML document covering every module. Unknown keys are rejected
//! and every missing key takes its default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crnet::CrNetConfig;
use crate::error::{ensure, Error, Result};
use crate::lrnet::LrNetConfig;
use crate::mask_refine::MaskRefineConfig;
use crate::params::config_hash;
use crate::shadow_model::{BiasConfig, DegradationConfig, SceneConfig};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Number of triplets.
    pub count: usize,
    /// Square image side.
    pub size: usize,
    pub scene: SceneConfig,
    pub degradation: DegradationConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 8,
            size: 96,
            scene: SceneConfig::default(),
            degradation: DegradationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds data generation, initialization and every sampling stream.
    pub seed: u64,
    /// Single-threaded execution for bit-reproducible runs.
    pub deterministic: bool,
    pub synth: SynthConfig,
    pub lrnet: LrNetConfig,
    pub crnet: CrNetConfig,
    pub mask_refine: MaskRefineConfig,
    pub train: TrainConfig,
    pub bias: BiasConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Copies the top-level seed into the training config.
    pub fn resolve(mut self) -> Self {
        self.train.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.synth.count >= 1, || "synth.count must be at least 1".into())?;
        ensure(self.synth.size >= 1, || "synth.size must be at least 1".into())?;
        self.synth.degradation.validate()?;
        self.lrnet.backbone.validate()?;
        self.crnet.backbone.validate()?;
        self.mask_refine.validate()?;
        self.train.validate()
    }

    pub fn hash(&self) -> u64 {
        config_hash(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml("sed = 3"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("[train.optimizer]\nlr = 1.0").is_err());
    }

    #[test]
    fn partial_documents_override() {
        let cfg = RunConfig::from_toml("seed = 9\n[train.optimizer]\ntotal_steps = 10").unwrap().resolve();
        assert_eq!(cfg.train.optimizer.total_steps, 10);
        assert_eq!(cfg.train.optimizer.crop, 96);
        assert_eq!(cfg.train.seed, 9);
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }

    #[test]
    fn nested_tables_parse() {
        let text = "[lrnet.backbone]\nbase_dim = 16\nroa_stages = [3, 4]\n\
                    [lrnet.backbone.roa]\nheads = 2\ngeometry = { window = 8, overlap = 0.5, dilation = 2 }\n\
                    [train]\ncolor_loss = \"chroma\"\n";
        let cfg = RunConfig::from_toml(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.lrnet.backbone.roa.heads, 2);
        assert_eq!(cfg.train.color_loss, crate::training::ColorLossSpace::Chroma);
    }
}
