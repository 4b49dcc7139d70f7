// SPDX-License-Identifier: Apache-2.0

//! Service configuration, read from the TOML file named by
//! `ADDICTFREE_CONFIG`. Every field has a default.

use std::path::{Path, PathBuf};

use addictfree_core::diversion::DEFAULT_RELAPSE_THRESHOLD;
use addictfree_core::predictor::TrainConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CONFIG_ENV: &str = "ADDICTFREE_CONFIG";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StoreSync {
    #[default]
    Always,
    Never,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen_address: String,
    pub store_path: PathBuf,
    pub store_sync: StoreSync,
    /// Minimum peak probability that triggers a pre-relapse notification.
    pub prediction_threshold: f64,
    pub predictor: TrainConfig,
    /// Train one model on every user's history instead of one per user.
    pub pooled_model: bool,
    /// Imported at startup when set.
    pub poi_csv_path: Option<PathBuf>,
    pub log_level: String,
    /// Bearer token with operator rights. Empty disables operator access.
    pub operator_token: String,
    pub tick_interval_s: u64,
    pub dispatch_interval_s: u64,
    /// Forecast length used by the scheduler.
    pub horizon_hours: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen_address: "127.0.0.1:8080".into(),
            store_path: "addictfree.db".into(),
            store_sync: StoreSync::Always,
            prediction_threshold: DEFAULT_RELAPSE_THRESHOLD,
            predictor: TrainConfig::default(),
            pooled_model: false,
            poi_csv_path: None,
            log_level: "info".into(),
            operator_token: String::new(),
            tick_interval_s: 3600,
            dispatch_interval_s: 30,
            horizon_hours: 24,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl ServiceConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: PathBuf::from("<inline>"),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        let cfg: Self = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_owned(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads the file named by `ADDICTFREE_CONFIG`, or defaults when unset.
    pub fn from_env() -> Result<Self, ConfigError> {
        match std::env::var_os(CONFIG_ENV) {
            Some(path) => Self::load(Path::new(&path)),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.prediction_threshold > 0.0 && self.prediction_threshold < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "prediction_threshold must lie strictly between 0 and 1, got {}",
                self.prediction_threshold
            )));
        }
        self.predictor
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.tick_interval_s == 0 || self.dispatch_interval_s == 0 {
            return Err(ConfigError::Invalid("intervals must be positive".into()));
        }
        if self.horizon_hours == 0 {
            return Err(ConfigError::Invalid("horizon_hours must be positive".into()));
        }
        Ok(())
    }
}
