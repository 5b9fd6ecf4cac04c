//! Run configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DataConfig, DataSource};
use crate::diagnostics::ReportOptions;
use crate::error::{Error, Result};
use crate::model::{check_resolution, ModelConfig};
use crate::sampler::SamplerConfig;
use crate::schedule::DiffusionSchedule;
use crate::training::TrainConfig;

/// Environment variable naming the default root for run directories.
pub const OUTPUT_ROOT_ENV: &str = "COLORSHIFT_OUTPUT";
pub const CONFIG_FILE: &str = "config.json";
pub const VERSION_FILE: &str = "VERSION";

/// Version string written next to every artifact.
pub fn code_version() -> String {
    format!("colorshift {}", env!("CARGO_PKG_VERSION"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub schedule: DiffusionSchedule,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub diagnostics: ReportOptions,
    /// Seeds model initialization and the train/test split.
    #[serde(default)]
    pub seed: u64,
    /// Root under which run directories are created when none is given.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(vec![path.display().to_string()]));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The resolved configuration with every default filled in.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        check_resolution(self.dataset.resolution).map_err(|_| {
            Error::Config(format!(
                "dataset.resolution must be divisible by 8, got {}",
                self.dataset.resolution
            ))
        })?;
        if self.model.channels != 1 {
            return Err(Error::Config(format!(
                "model.channels must be 1 for single-channel datasets, got {}",
                self.model.channels
            )));
        }
        if self.dataset.kind == DataSource::Grf && !self.dataset.resolution.is_power_of_two() {
            return Err(Error::Config(format!(
                "dataset.resolution must be a power of two for grf, got {}",
                self.dataset.resolution
            )));
        }
        self.train.validate()?;
        self.sampler.validate(&self.schedule)?;
        self.diagnostics.validate()
    }

    /// `output_dir`, else `$COLORSHIFT_OUTPUT`, else `runs`.
    pub fn output_root(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn default_run_name(&self) -> String {
        let kind = match self.model.kind {
            crate::model::ModelKind::Baseline => "baseline",
            crate::model::ModelKind::Modified => "modified",
        };
        format!("{kind}-{}-seed{}", self.dataset.resolution, self.seed)
    }

    /// Writes the resolved config and the version string into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, self.to_json() + "\n").map_err(|e| Error::io(&path, e))?;
        let path = dir.join(VERSION_FILE);
        std::fs::write(&path, code_version() + "\n").map_err(|e| Error::io(&path, e))
    }
}
