use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};
use sparse_tune::engine::TrainConfig;
use sparse_tune::model::ModelSpec;
use sparse_tune::synth::{SuiteConfig, TaskKind};
use sparse_tune::transfer::{language_config, task_config, Metric};

use crate::error::CliError;

/// The whole experiment, as read from a TOML file. Every field is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Single seed for data generation, pretraining and SFT training.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelSpec,
    pub suite: SuiteConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    /// Fields missing here keep the language-SFT defaults. `seed` is
    /// replaced by the top-level seed.
    #[serde(deserialize_with = "language_table")]
    pub language: TrainConfig,
    /// Fields missing here keep the task-SFT defaults. `seed` is replaced
    /// by the top-level seed.
    #[serde(deserialize_with = "task_table")]
    pub task: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

/// Overlays the keys of a partial table on `base`.
fn overlay<'de, D: Deserializer<'de>>(base: TrainConfig, d: D) -> Result<TrainConfig, D::Error> {
    let patch = toml::Table::deserialize(d)?;
    let mut merged = toml::Table::try_from(&base).map_err(serde::de::Error::custom)?;
    merged.extend(patch);
    merged.try_into().map_err(serde::de::Error::custom)
}

fn language_table<'de, D: Deserializer<'de>>(d: D) -> Result<TrainConfig, D::Error> {
    overlay(language_config(), d)
}

fn task_table<'de, D: Deserializer<'de>>(d: D) -> Result<TrainConfig, D::Error> {
    overlay(task_config(), d)
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            out_dir: PathBuf::from("run"),
            model: ModelSpec::default(),
            suite: SuiteConfig::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            language: language_config(),
            task: task_config(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Pretraining sentences per language.
    pub pretrain_sentences: usize,
    /// Languages given only `low_resource_sentences` in pretraining.
    pub low_resource: Vec<String>,
    pub low_resource_sentences: usize,
    /// Monolingual sentences per language for language SFTs.
    pub language_sentences: usize,
    pub task_examples: usize,
    pub eval_examples: usize,
    /// Examples taken from each source in multi-source task training.
    pub multi_source_cap: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            pretrain_sentences: 2000,
            low_resource: (0..4).map(|i| format!("tgt{i}")).collect(),
            low_resource_sentences: 100,
            language_sentences: 2000,
            task_examples: 1000,
            eval_examples: 500,
            multi_source_cap: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 3000,
            learning_rate: 1e-3,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Metric for tagging; agreement detection always uses accuracy.
    pub tagging_metric: Metric,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tagging_metric: Metric::Accuracy,
        }
    }
}

impl EvalConfig {
    pub fn metric_for(&self, task: TaskKind) -> Metric {
        match task {
            TaskKind::CategoryTagging => self.tagging_metric,
            TaskKind::AgreementDetection => Metric::Accuracy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub levels: Vec<f64>,
    pub seeds: Vec<u64>,
    pub source: String,
    pub targets: Vec<String>,
    pub task: TaskKind,
    /// Shortened Phase 1 and Phase 2 length for sweep language SFTs.
    pub language_steps: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            levels: vec![0.05, 0.1, 0.3, 0.6, 1.0],
            seeds: vec![0],
            source: "src0".into(),
            targets: vec!["tgt0".into()],
            task: TaskKind::CategoryTagging,
            language_steps: Some(100),
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Config, CliError> {
        let Some(path) = path else {
            return Ok(Config::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: Config = toml::from_str(&text)
            .map_err(|e| CliError::Invalid(format!("{}: {}", path.display(), e.message())))?;
        cfg.validate()
            .map_err(|m| CliError::Invalid(format!("{}: {}", path.display(), m)))?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), String> {
        self.model.validate().map_err(|e| format!("model: {e}"))?;
        self.language
            .validate()
            .map_err(|e| format!("language: {e}"))?;
        self.task.validate().map_err(|e| format!("task: {e}"))?;
        let lr = self.pretrain.learning_rate;
        if self.pretrain.batch_size == 0 || !lr.is_finite() || lr <= 0.0 {
            return Err("pretrain: batch size and learning rate must be positive".into());
        }
        Ok(())
    }
}
