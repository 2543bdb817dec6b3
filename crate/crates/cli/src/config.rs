use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use nicetrans::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    /// Train on the listed (fixed, moving) pairs.
    #[default]
    Pairs,
    /// Pool every image and draw random pairs.
    Images,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding a `manifest.json`.
    pub dir: Option<PathBuf>,
    pub mode: DataMode,
    /// Labelled pairs for validation and sweep scoring; falls back to
    /// `dir` for sweeps.
    pub validation_dir: Option<PathBuf>,
}

/// Everything a run needs. Written back fully resolved next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: PathBuf,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { out: PathBuf::from("run"), data: DataConfig::default(), train: TrainConfig::default() }
    }
}

fn absolute(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Parse a TOML file; relative paths are taken relative to it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = std::path::absolute(&base)?;
        cfg.out = absolute(&base, &cfg.out);
        cfg.data.dir = cfg.data.dir.map(|d| absolute(&base, &d));
        cfg.data.validation_dir = cfg.data.validation_dir.map(|d| absolute(&base, &d));
        Ok(cfg)
    }

    /// Make every path absolute against the working directory.
    pub fn resolve(mut self) -> Result<Self> {
        self.out = std::path::absolute(&self.out)?;
        self.data.dir = self.data.dir.map(std::path::absolute).transpose()?;
        self.data.validation_dir = self.data.validation_dir.map(std::path::absolute).transpose()?;
        self.train.validate()?;
        Ok(self)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))
    }
}
