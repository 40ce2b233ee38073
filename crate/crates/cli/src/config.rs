//! The run configuration file: TOML with one section per stage.

use std::path::{Path, PathBuf};

use hint_core::costmodel::CostScenario;
use hint_core::training::{Mode, Setting, TrainConfig};
use hint_core::transformer::ModelConfig;
use hint_core::{HintError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Plain-text pretraining corpus; the bundled sample text when unset.
    pub corpus: Option<PathBuf>,
    pub suite_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            suite_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub settings: Vec<Setting>,
    pub shots: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            settings: vec![Setting::Hint],
            shots: vec![0, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model_seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model_seed: 0,
            model: ModelConfig::desk(),
            data: DataConfig::default(),
            pretrain: TrainConfig {
                steps: 300,
                mode: Mode::Pretrain,
                ..TrainConfig::default()
            },
            finetune: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| HintError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HintError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Custom scenarios for `cost-report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub reference: String,
    pub scenario: Vec<CostScenario>,
}

impl ScenarioFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HintError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| HintError::Config(e.to_string()))
    }
}
