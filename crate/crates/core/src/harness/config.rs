use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{EncodeOptions, Task};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::vocab::Vocab;

/// Hyperparameter grid. Finetuning a large pretrained encoder uses rates
/// near 2e-5 to 3e-5; desk models train from scratch and need larger ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub learning_rates: Vec<f64>,
    pub epochs: Vec<usize>,
    pub seeds: Vec<u64>,
    /// With an init checkpoint, also run every cell without it.
    pub both_populations: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            learning_rates: vec![1e-3, 3e-4],
            epochs: vec![3, 4, 5],
            seeds: vec![0, 1],
            both_populations: false,
        }
    }
}

/// Caption pretraining schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            learning_rate: 1e-3,
            epochs: 2,
            batch_size: 32,
            mask_rate: crate::data::MASK_RATE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub linear_decay: bool,
    pub init_checkpoint: Option<PathBuf>,
    pub variant: Variant,
    /// Finetuning tasks; each contributes one 4-way group per question.
    pub tasks: Vec<Task>,
    /// `model.encoder.vocab_size = 0` sizes the table to the vocabulary.
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub pretrain: PretrainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 3,
            batch_size: 32,
            seed: 0,
            linear_decay: true,
            init_checkpoint: None,
            variant: Variant::Full,
            tasks: vec![Task::Qa, Task::Qar],
            model: ModelConfig::default(),
            grid: GridConfig::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be finite and >= 0", self.learning_rate));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if self.tasks.is_empty() {
            return bad("at least one task is required".into());
        }
        if self.grid.epochs.contains(&0) || self.grid.learning_rates.iter().any(|&l| l < 0.0) {
            return bad("grid entries must be positive".into());
        }
        if self.pretrain.epochs == 0 || self.pretrain.batch_size == 0 {
            return bad("pretrain epochs and batch_size must be at least 1".into());
        }
        Ok(())
    }

    /// The model config with this run's variant and a resolved vocabulary size.
    pub fn model_config(&self, vocab: &Vocab) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        m.variant = self.variant;
        if m.encoder.vocab_size == 0 {
            m.encoder.vocab_size = vocab.len();
        }
        if m.encoder.vocab_size < vocab.len() {
            return Err(Error::Vocab(format!(
                "vocabulary of {} tokens exceeds vocab_size {}",
                vocab.len(),
                m.encoder.vocab_size
            )));
        }
        m.validate()?;
        Ok(m)
    }

    pub fn encode_options(&self, model: &ModelConfig) -> EncodeOptions {
        EncodeOptions::for_variant(model.variant, model.encoder.max_positions)
    }
}

/// Lowercase hex SHA-256 of the compact JSON form of `value`.
pub fn digest<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    let hash = Sha256::digest(&json);
    Ok(hash.iter().map(|b| format!("{b:02x}")).collect())
}
