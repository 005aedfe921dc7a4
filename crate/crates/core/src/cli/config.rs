use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::pipeline::ExperimentConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}: {msg}")]
    Parse { origin: String, msg: String },
    #[error("cannot serialize configuration: {0}")]
    Serialize(String),
}

/// Parses TOML; omitted keys take their defaults and unknown keys are errors.
pub fn parse_config(text: &str, origin: &str) -> Result<ExperimentConfig, ConfigError> {
    toml::from_str(text).map_err(|e| ConfigError::Parse {
        origin: origin.to_string(),
        msg: e.to_string().trim_end().to_string(),
    })
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text, &path.display().to_string())
}

/// Every effective value, in a form [`parse_config`] reads back unchanged.
pub fn config_to_toml(cfg: &ExperimentConfig) -> Result<String, ConfigError> {
    if cfg.seed > i64::MAX as u64 {
        return Err(ConfigError::Serialize(format!("seed {} exceeds the TOML integer range", cfg.seed)));
    }
    toml::to_string(cfg).map_err(|e| ConfigError::Serialize(e.to_string()))
}
