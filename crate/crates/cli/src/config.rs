//! Experiment configuration: a TOML file whose values command-line flags
//! override.

use std::path::{Path, PathBuf};

use bvv_core::nanoformer::{EmbeddingMode, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: EmbeddingMode,
    pub paths: Paths,
    pub profile: ModelProfile,
    pub train: TrainConfig,
    pub ablation: AblationSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: EmbeddingMode::FrozenVisual,
            paths: Paths::default(),
            profile: ModelProfile::default(),
            train: TrainConfig::default(),
            ablation: AblationSettings::default(),
        }
    }
}

/// Input and output locations. Unset inputs fall back to the bundled
/// fixtures (Unifont subset, compact vocabulary, toy corpus).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub font: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    pub outdir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            font: None,
            vocab: None,
            corpus: None,
            embeddings: None,
            outdir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelProfile {
    /// Vocabulary size used when building a vocabulary.
    pub vocab_size: usize,
    /// Side `H` of the square glyph image.
    pub side: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub block_size: usize,
}

impl Default for ModelProfile {
    fn default() -> Self {
        Self {
            vocab_size: 1024,
            side: 16,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            block_size: 32,
        }
    }
}

impl ModelProfile {
    pub fn model_config(&self, vocab_size: usize, mode: EmbeddingMode) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            block_size: self.block_size,
            embedding_mode: mode,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    /// Training-loss level used for steps-to-threshold.
    pub threshold: f64,
    /// Moving-average window applied before the threshold test.
    pub window: usize,
    /// Seed for the random-bitmap embedding.
    pub random_seed: u64,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            threshold: 4.0,
            window: 50,
            random_seed: 7,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let p = &self.profile;
        let t = &self.train;
        let positive = [
            ("profile.vocab_size", p.vocab_size),
            ("profile.side", p.side),
            ("profile.d_model", p.d_model),
            ("profile.n_layers", p.n_layers),
            ("profile.n_heads", p.n_heads),
            ("profile.block_size", p.block_size),
            ("train.batch", t.batch),
            ("train.accum", t.accum),
            ("ablation.window", self.ablation.window),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CliError::Config(format!("{name} must be positive")));
            }
        }
        if t.steps == 0 || t.eval_every == 0 {
            return Err(CliError::Config("train.steps and train.eval_every must be positive".into()));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(CliError::Config("train.lr must be positive".into()));
        }
        if p.d_model > p.side * p.side {
            return Err(CliError::Config(format!(
                "d_model {} exceeds H² = {}",
                p.d_model,
                p.side * p.side
            )));
        }
        if p.d_model % p.n_heads != 0 {
            return Err(CliError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                p.d_model, p.n_heads
            )));
        }
        for path in [&self.paths.font, &self.paths.vocab, &self.paths.corpus, &self.paths.embeddings]
            .into_iter()
            .flatten()
        {
            if !path.exists() {
                return Err(CliError::Config(format!("{} does not exist", path.display())));
            }
        }
        Ok(())
    }
}
