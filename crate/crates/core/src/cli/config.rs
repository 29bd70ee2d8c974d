use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub precision: Precision,
    /// Write an intermediate checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("runs/default"),
            precision: Precision::F32,
            checkpoint_every: 0,
        }
    }
}

/// One experiment file: `[dataset]`, `[train]` and `[experiment]` sections,
/// every key optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub experiment: ExperimentSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        if self.experiment.seeds.is_empty() {
            return Err(Error::InvalidConfig {
                field: "experiment.seeds".into(),
                reason: "at least one seed is required".into(),
            });
        }
        let mut seeds = self.experiment.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.experiment.seeds.len() {
            return Err(Error::InvalidConfig {
                field: "experiment.seeds".into(),
                reason: "seeds must be distinct".into(),
            });
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig {
            field: "<config>".into(),
            reason: e.to_string(),
        })
    }
}
