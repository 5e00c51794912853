//! Run configuration: a TOML file plus command-line overrides.
//!
//! ```toml
//! seed = 7
//! data = "toy.json"          # dataset cache
//! out = "runs/lp"            # checkpoints, loss CSV, snapshots
//! model_preset = "desk"      # full | desk | toy | tiny, unless [model] is given
//!
//! [text]
//! backend = "hashed"         # or "vectors" with path = "..." and vocab_limit
//! seed = 0
//!
//! [model]                    # optional explicit widths
//! gen_channels = [64, 32, 16, 16]
//! critic_channels = [4, 8, 16, 32]
//! regression_hidden = 128
//!
//! [train]                    # any TrainConfig field
//! steps = 500
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use textpose::model::ModelConfig;
use textpose::textenc::{load_vectors, VocabEmbedding};
use textpose::training::TrainConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TextConfig {
    Hashed {
        #[serde(default)]
        seed: u64,
    },
    Vectors {
        path: PathBuf,
        #[serde(default)]
        vocab_limit: Option<usize>,
    },
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig::Hashed { seed: 0 }
    }
}

impl TextConfig {
    pub fn load(&self) -> Result<VocabEmbedding, CliError> {
        Ok(match self {
            TextConfig::Hashed { seed } => VocabEmbedding::hashed(*seed),
            TextConfig::Vectors { path, vocab_limit } => load_vectors(path, *vocab_limit)?,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub model_preset: Option<String>,
    pub model: Option<ModelConfig>,
    pub text: TextConfig,
    pub train: TrainConfig,
}

pub fn preset(name: &str) -> Result<ModelConfig, CliError> {
    match name {
        "full" => Ok(ModelConfig::full()),
        "desk" => Ok(ModelConfig::desk()),
        "toy" => Ok(ModelConfig::toy()),
        "tiny" => Ok(ModelConfig::tiny()),
        other => Err(CliError::Invalid(format!("unknown model preset {other:?} (full, desk, toy, tiny)"))),
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| textpose::Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
    }

    /// Explicit widths win over the preset; the default preset is `desk`.
    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        match (&self.model, &self.model_preset) {
            (Some(m), _) => Ok(m.clone()),
            (None, Some(p)) => preset(p),
            (None, None) => Ok(ModelConfig::desk()),
        }
    }
}

/// Writes `value` as TOML to `path`.
pub fn write_snapshot(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = toml::to_string_pretty(value).map_err(|e| CliError::Internal(format!("snapshot: {e}")))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| textpose::Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| textpose::Error::io(path, e).into())
}
