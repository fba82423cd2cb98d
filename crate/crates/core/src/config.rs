//! One TOML file configures every stage. Missing sections and fields take
//! their defaults; sections belonging to other components are ignored.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{BuildConfig, LiveClientConfig};
use crate::detector::DetectorConfig;
use crate::dtg::{DtgConfig, DtgTrainConfig};
use crate::eval::SuiteConfig;
use crate::locator::LocatorConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DtgSection {
    pub model: DtgConfig,
    pub train: DtgTrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectConfig {
    pub build: BuildConfig,
    /// Live description service; the key is read from `client.api_key_env`.
    pub client: LiveClientConfig,
    pub dtg: DtgSection,
    pub detector: DetectorConfig,
    pub locator: LocatorConfig,
    pub suite: SuiteConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: {cause}")]
    Toml { path: String, cause: toml::de::Error },
}

impl ProjectConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })?;
        toml::from_str(&text).map_err(|cause| ConfigError::Toml { path: path.display().to_string(), cause })
    }

    /// Defaults when `path` is `None`.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, ConfigError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}
