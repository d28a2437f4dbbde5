//! Run configuration shared by the command-line tools.
//!
//! The file is JSON with the field names of [`Config`]. Relative paths are
//! resolved against the directory holding the config file. Command-line
//! flags override config values; environment variables are only consulted
//! for the endpoint's API token.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curriculum::Strategy;
use crate::metrics::DEFAULT_MIN_SUCCESSFUL;
use crate::synthesis::EndpointConfig;
use crate::trajectory::Budgets;

pub const DEFAULT_EPOCHS: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

fn default_epochs() -> usize {
    DEFAULT_EPOCHS
}
fn default_strategy() -> Strategy {
    Strategy::Ours
}
fn default_min_successful() -> usize {
    DEFAULT_MIN_SUCCESSFUL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub corpus_dir: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub budgets: Budgets,
    #[serde(default)]
    pub error_pattern_file: Option<PathBuf>,
    #[serde(default)]
    pub endpoint: Option<EndpointConfig>,
    #[serde(default = "default_min_successful")]
    pub min_successful: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            corpus_dir: None,
            output_dir: None,
            epochs: DEFAULT_EPOCHS,
            strategy: Strategy::Ours,
            seed: None,
            budgets: Budgets::default(),
            error_pattern_file: None,
            endpoint: None,
            min_successful: DEFAULT_MIN_SUCCESSFUL,
        }
    }
}

impl Config {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, serde_json::Error> {
        let mut cfg: Config = serde_json::from_str(text)?;
        for p in [&mut cfg.corpus_dir, &mut cfg.output_dir, &mut cfg.error_pattern_file]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let cfg = Self::parse(&text, base).map_err(|source| ConfigError::Json {
            path: path.display().to_string(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.epochs == 0 {
            return Err(ConfigError::Invalid("epochs must be at least 1".into()));
        }
        if let Some(e) = &self.endpoint {
            e.validate().map_err(ConfigError::Invalid)?;
        }
        Ok(())
    }
}
