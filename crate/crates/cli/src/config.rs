//! Settings resolution. Flags and environment variables arrive through clap
//! (flags win); the TOML file fills whatever is still unset.

use std::path::{Path, PathBuf};

use anyhow::Context;
use lensflow_core::corpus::BUNDLED_NAME;
use lensflow_core::graph::PruneConfig;
use serde::Deserialize;

use crate::UsageError;

pub const DEFAULT_HOST: &str = "127.0.0.1";
pub const DEFAULT_PORT: u16 = 8080;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<PathBuf>,
    pub host: Option<String>,
    pub port: Option<u16>,
    pub corpus: Option<String>,
    pub static_dir: Option<PathBuf>,
    pub prune: Option<PruneConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let raw = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&raw).map_err(|e| anyhow::anyhow!("config {}: {}", path.display(), e.message()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub model: PathBuf,
    pub host: String,
    pub port: u16,
    pub corpus: String,
    pub static_dir: Option<PathBuf>,
    pub prune: PruneConfig,
}

/// Values already merged from flags and environment by clap.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub model: Option<PathBuf>,
    pub host: Option<String>,
    pub port: Option<u16>,
    pub corpus: Option<String>,
    pub static_dir: Option<PathBuf>,
}

impl ServiceConfig {
    pub fn resolve(over: Overrides, file: FileConfig) -> anyhow::Result<Self> {
        let model = over.model.or(file.model).ok_or_else(|| {
            UsageError("no model given: pass --model, set LENSFLOW_MODEL or add `model` to the config file".into())
        })?;
        let config = Self {
            model,
            host: over.host.or(file.host).unwrap_or_else(|| DEFAULT_HOST.to_string()),
            port: over.port.or(file.port).unwrap_or(DEFAULT_PORT),
            corpus: over.corpus.or(file.corpus).unwrap_or_else(|| BUNDLED_NAME.to_string()),
            static_dir: over.static_dir.or(file.static_dir),
            prune: file.prune.unwrap_or_default(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.port == 0 {
            return Err(UsageError("port must be in 1..=65535".into()).into());
        }
        if !self.model.is_dir() {
            anyhow::bail!("model directory {} does not exist", self.model.display());
        }
        if let Some(dir) = &self.static_dir {
            if !dir.is_dir() {
                anyhow::bail!("static directory {} does not exist", dir.display());
            }
        }
        Ok(())
    }
}
