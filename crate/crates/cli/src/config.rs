//! The single TOML document that configures every subcommand.

use std::path::{Path, PathBuf};

use motionsynth::dataset::GenerationConfig;
use motionsynth::probe::{Architecture, TrainConfig};
use motionsynth::toy::ToyConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Training sections are taken whole: a section that is present must list
/// every field, an absent one falls back to its preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default = "TrainConfig::pretrain")]
    pub pretrain: TrainConfig,
    #[serde(default = "TrainConfig::transfer")]
    pub transfer: TrainConfig,
    #[serde(default = "TrainConfig::scratch")]
    pub scratch: TrainConfig,
    #[serde(default)]
    pub toy: ToyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            paths: Paths::default(),
            generation: GenerationConfig::default(),
            architecture: Architecture::default(),
            pretrain: TrainConfig::pretrain(),
            transfer: TrainConfig::transfer(),
            scratch: TrainConfig::scratch(),
            toy: ToyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, Failure> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Failure::usage(format!("config: {e}")))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Failure::usage(format!(
                "config schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.generation.validate().map_err(Failure::usage_from)?;
        for t in [&self.pretrain, &self.transfer, &self.scratch] {
            t.validate().map_err(Failure::usage_from)?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, Failure> {
        toml::to_string_pretty(self).map_err(|e| Failure::data(format!("cannot serialize config: {e}")))
    }
}
