use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ModelParams;
use super::train::{TrainConfig, TrainingLog};
use super::{Model, ModelConfig, ModelError};
use crate::etl::TokenPreprocessor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// A model trained with one fold held out, with the statistics it was
/// trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldModel {
    pub fold: usize,
    pub vocabulary_hash: String,
    pub preprocessor: TokenPreprocessor,
    pub params: ModelParams,
    pub log: TrainingLog,
}

impl FoldModel {
    pub fn model(&self, config: &ModelConfig) -> Result<Model, ModelError> {
        if self.params.vocab_size() != self.preprocessor.vocab_size() || self.params.static_dim() != self.preprocessor.static_dim() {
            return Err(ModelError::Shape(format!(
                "fold {} parameters do not match its preprocessor",
                self.fold
            )));
        }
        Ok(Model::from_parts(config.clone(), self.params.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub train_config: TrainConfig,
    pub catalog_hash: String,
    pub seed: u64,
    pub folds: Vec<FoldModel>,
}

impl Checkpoint {
    pub fn fold(&self, fold: usize) -> Result<&FoldModel, ModelError> {
        self.folds
            .iter()
            .find(|f| f.fold == fold)
            .ok_or_else(|| ModelError::Checkpoint(format!("no model for fold {fold}")))
    }

    /// Refuses datasets built from a different variable catalog, and fold
    /// models whose vocabulary does not match its recorded hash.
    pub fn verify(&self, catalog_hash: &str) -> Result<(), ModelError> {
        if self.catalog_hash != catalog_hash {
            return Err(ModelError::VocabularyMismatch {
                expected: catalog_hash.to_string(),
                found: self.catalog_hash.clone(),
            });
        }
        for f in &self.folds {
            let actual = f.preprocessor.vocabulary.hash();
            if actual != f.vocabulary_hash || f.preprocessor.catalog_hash != catalog_hash {
                return Err(ModelError::VocabularyMismatch {
                    expected: f.vocabulary_hash.clone(),
                    found: actual,
                });
            }
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), ModelError> {
    let json = serde_json::to_string(checkpoint).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let partial = path.with_extension("partial");
    std::fs::write(&partial, json).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", partial.display())))?;
    std::fs::rename(&partial, path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
}

/// Reads a checkpoint and, when `catalog_hash` is given, verifies it
/// against the dataset.
pub fn load_checkpoint(path: &Path, catalog_hash: Option<&str>) -> Result<Checkpoint, ModelError> {
    let text = std::fs::read_to_string(path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    let checkpoint: Checkpoint = serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    if checkpoint.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "format version {} is not supported",
            checkpoint.format_version
        )));
    }
    checkpoint.config.validate()?;
    if let Some(h) = catalog_hash {
        checkpoint.verify(h)?;
    }
    Ok(checkpoint)
}
