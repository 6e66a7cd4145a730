//! Transformer over triplet embeddings with attention fusion, a static
//! feed-forward branch and a classification head, trained by explicit
//! backpropagation in 64-bit floats.

pub mod checkpoint;
pub mod forward;
pub mod gradcheck;
pub mod logistic;
pub mod mask;
pub mod params;
pub mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{EncodingError, PositionTable};
use crate::etl::ShiftRecord;
use crate::phenotype::AcuityLabel;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FoldModel};
pub use forward::{forward, loss, predict_batch, Gradients};
pub use mask::{build_mask, AttentionMask};
pub use params::ModelParams;
pub use train::{train, EpochLog, TrainConfig, TrainedModel, TrainingLog};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize, log: Box<TrainingLog> },
    #[error("input does not match the model: {0}")]
    Shape(String),
    #[error("checkpoint vocabulary {found} does not match dataset vocabulary {expected}")]
    VocabularyMismatch { expected: String, found: String },
    #[error("empty {0} set")]
    EmptySet(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AttentionKind {
    Full,
    /// Attend within `window` positions; the first `global` positions attend
    /// and are attended everywhere.
    SlidingWindowGlobal { window: usize, global: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    FourClass,
    BinaryDelirium,
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::FourClass => 4,
            HeadKind::BinaryDelirium => 1,
        }
    }

    /// Training target of a shift, or `None` when it has none under this head.
    pub fn target(self, record: &ShiftRecord) -> Option<usize> {
        match self {
            HeadKind::FourClass => record.label.class_index(),
            HeadKind::BinaryDelirium => record.binary_delirium_label.map(usize::from),
        }
    }

    pub fn class_count(self) -> usize {
        match self {
            HeadKind::FourClass => 4,
            HeadKind::BinaryDelirium => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub static_hidden: usize,
    pub attention: AttentionKind,
    /// Add sinusoidal order encodings to the token embeddings.
    pub positions: bool,
    pub max_positions: usize,
    pub head: HeadKind,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            layers: 2,
            heads: 4,
            ffn_hidden: 64,
            static_hidden: 32,
            attention: AttentionKind::Full,
            positions: false,
            max_positions: crate::etl::extract::DEFAULT_MAX_SEQUENCE_LENGTH,
            head: HeadKind::FourClass,
            dropout: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return err("d must be a positive multiple of heads");
        }
        if self.layers == 0 {
            return err("at least one transformer layer is required");
        }
        if self.ffn_hidden == 0 || self.static_hidden == 0 {
            return err("hidden sizes must be positive");
        }
        if let AttentionKind::SlidingWindowGlobal { window, .. } = self.attention {
            if window == 0 {
                return err("sliding window must be at least 1");
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err("dropout must lie in [0, 1)");
        }
        if self.positions && self.max_positions == 0 {
            return err("max_positions must be positive");
        }
        Ok(())
    }

    /// The masked-attention variant with order positions.
    pub fn sliding(window: usize, global: usize) -> Self {
        ModelConfig {
            attention: AttentionKind::SlidingWindowGlobal { window, global },
            positions: true,
            ..ModelConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionOutput {
    /// Four class probabilities, or the single delirium probability.
    pub probabilities: Vec<f64>,
    pub predicted_class: usize,
}

impl PredictionOutput {
    /// Argmax with ties toward the lowest index; a single probability is
    /// thresholded at 0.5.
    pub fn from_probabilities(probabilities: Vec<f64>) -> Self {
        let predicted_class = if probabilities.len() == 1 {
            usize::from(probabilities[0] >= 0.5)
        } else {
            let mut best = 0;
            for (c, &p) in probabilities.iter().enumerate() {
                if p > probabilities[best] {
                    best = c;
                }
            }
            best
        };
        PredictionOutput {
            probabilities,
            predicted_class,
        }
    }

    pub fn predicted_label(&self) -> Option<AcuityLabel> {
        if self.probabilities.len() == 4 {
            AcuityLabel::from_class_index(self.predicted_class)
        } else {
            None
        }
    }
}

/// Configuration, parameters and the derived position table.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub positions: Option<PositionTable>,
}

impl Model {
    pub fn new(config: ModelConfig, vocab_size: usize, static_dim: usize) -> Result<Self, ModelError> {
        config.validate()?;
        let params = ModelParams::init(&config, vocab_size, static_dim);
        Ok(Model::from_parts(config, params))
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams) -> Self {
        let positions = config
            .positions
            .then(|| PositionTable::sinusoidal(config.max_positions, config.d));
        Model {
            config,
            params,
            positions,
        }
    }
}
