//! One TOML file configures every stage; absent keys take their defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::SyntheticDatasetSpec;
use super::synthetic::SyntheticSceneSpec;
use crate::detector::{ModelSpec, TrainingConfig};
use crate::error::{Error, Result};
use crate::quantify::AtlasConfig;
use crate::registration::{PreprocessConfig, RegistrationConfig};
use crate::section::SectionConfig;
use crate::stats::StatsConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Seeds the train/test split of annotated images.
    pub seed: u64,
    /// Synthetic training tiles.
    pub corpus: SyntheticSceneSpec,
    pub corpus_size: usize,
    /// Share of annotated images used for training.
    pub train_fraction: f64,
    pub model: ModelSpec,
    pub training: TrainingConfig,
    pub section: SectionConfig,
    pub preprocess: PreprocessConfig,
    pub registration: RegistrationConfig,
    pub recurrences: usize,
    pub atlas: AtlasConfig,
    pub stats: StatsConfig,
    /// Synthetic sections and atlases.
    pub dataset: SyntheticDatasetSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            corpus: SyntheticSceneSpec::default(),
            corpus_size: 1000,
            train_fraction: 0.5,
            model: ModelSpec::default(),
            training: TrainingConfig::desk_scale(),
            section: SectionConfig::default(),
            preprocess: PreprocessConfig::default(),
            registration: RegistrationConfig::default(),
            recurrences: 20,
            atlas: AtlasConfig::default(),
            stats: StatsConfig::default(),
            dataset: SyntheticDatasetSpec::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format {
            what: "config",
            detail: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format {
            what: "config",
            detail: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        self.registration.validate()?;
        self.corpus.validate()?;
        if self.recurrences == 0 {
            return Err(Error::InvalidArgument("recurrences must be at least 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidArgument("train_fraction must lie in (0, 1)".into()));
        }
        if self.section.tile_size as usize + 1 != self.model.tile_extent {
            return Err(Error::InvalidArgument(format!(
                "section tile size {} must be one less than the model tile extent {}",
                self.section.tile_size, self.model.tile_extent
            )));
        }
        Ok(())
    }
}
