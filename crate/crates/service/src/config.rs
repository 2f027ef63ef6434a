use std::path::{Path, PathBuf};

use nimbus_core::backend::BackendKind;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Environment variable naming the config file; wins over `--config`.
pub const CONFIG_ENV: &str = "NIMBUS_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io ({path}): {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Flat key-value service configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    pub data_dir: PathBuf,
    pub backend: BackendKind,
    /// Crowd profile for the simulated backend; paper2016 when unset.
    pub profile: Option<PathBuf>,
    pub sim_seed: u64,
    /// Defaults for tasks that do not set their own timeouts.
    pub per_stage_timeout_s: f64,
    pub overall_timeout_s: f64,
    /// Static worker UI assets served under /worker/.
    pub worker_ui_dir: Option<PathBuf>,
    pub max_image_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("nimbus-data"),
            backend: BackendKind::LiveQueue,
            profile: None,
            sim_seed: 2016,
            per_stage_timeout_s: 900.0,
            overall_timeout_s: 7200.0,
            worker_ui_dir: None,
            max_image_bytes: 20 << 20,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Reads the file named by `NIMBUS_CONFIG`, else `path`, else defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let chosen = std::env::var_os(CONFIG_ENV)
            .map(PathBuf::from)
            .or_else(|| path.map(Path::to_path_buf));
        let Some(path) = chosen else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io {
            path: path.clone(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.per_stage_timeout_s > 0.0 && self.overall_timeout_s > 0.0) {
            return Err(ConfigError::Invalid("timeouts must be > 0".into()));
        }
        if self.max_image_bytes == 0 {
            return Err(ConfigError::Invalid("max_image_bytes must be > 0".into()));
        }
        Ok(())
    }

    pub fn log_path(&self) -> PathBuf {
        self.data_dir.join("events.jsonl")
    }

    pub fn image_dir(&self) -> PathBuf {
        self.data_dir.join("images")
    }
}
