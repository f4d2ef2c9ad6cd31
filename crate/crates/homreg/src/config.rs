//! TOML configuration with `[synth]`, `[model]`, and `[train]` sections.
//! Every key matches a config-struct field name; unknown keys are hard
//! errors so a typo can't silently fall back to a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<AppConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(toml::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg: AppConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, AppConfig::default());

        let cfg: AppConfig = toml::from_str(
            "[synth]\npatch_size = 64\n\n[model]\nbase_channels = 32\n\n[train]\nbatch_size = 4\n",
        )
        .unwrap();
        assert_eq!(cfg.synth.patch_size, 64);
        assert_eq!(cfg.model.base_channels, 32);
        assert_eq!(cfg.train.batch_size, 4);
        // untouched keys keep their defaults
        assert_eq!(cfg.synth.max_perturbation, SynthConfig::default().max_perturbation);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<AppConfig>("[synth]\npatchsize = 64\n").is_err());
        assert!(toml::from_str::<AppConfig>("[nonsense]\nx = 1\n").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        let mut cfg = AppConfig::default();
        cfg.train.learning_rate = 1e-3;
        std::fs::write(&path, toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(AppConfig::load(&path).unwrap(), cfg);
    }
}
