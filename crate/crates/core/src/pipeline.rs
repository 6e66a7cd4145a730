//! Cross-validated training and per-fold scoring over a prepared bundle.

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::etl::{Bundle, EtlError, ShiftRecord, TabularPreprocessor, TokenPreprocessor};
use crate::evaluation::{FoldPredictions, FoldScorer, MetricError, ScoredExample};
use crate::model::checkpoint::CHECKPOINT_FORMAT_VERSION;
use crate::model::logistic::{fit_logistic, LogisticConfig};
use crate::model::{predict_batch, train, Checkpoint, FoldModel, HeadKind, ModelConfig, ModelError, TrainConfig};
use crate::phenotype::AcuityLabel;
use crate::seeds;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Etl(#[from] EtlError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{0}")]
    Config(String),
}

/// SHA-256 of the JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("configuration serializes");
    hex::encode(Sha256::digest(bytes))
}

fn check_fold(bundle: &Bundle, fold: usize) -> Result<(), PipelineError> {
    if fold >= bundle.split.fold_count {
        return Err(PipelineError::Config(format!(
            "fold {fold} out of range; the bundle has {} folds",
            bundle.split.fold_count
        )));
    }
    Ok(())
}

/// Trains the model of one fold on the fold's training rows, early-stopping
/// on its validation rows.
pub fn train_fold(
    bundle: &Bundle,
    fold: usize,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<FoldModel, PipelineError> {
    check_fold(bundle, fold)?;
    let view = bundle.split.fold(fold);
    let cohort = bundle.cohort();
    let pre = TokenPreprocessor::fit(&cohort, &view.train, bundle.manifest.config.prevalence_threshold)?;
    let train_set = pre.transform(&cohort, &view.train)?;
    let validation_set = pre.transform(&cohort, &view.validation)?;
    let model_config = ModelConfig {
        seed: seeds::derive_seed(model_config.seed, &[fold as u64]),
        ..model_config.clone()
    };
    let train_config = TrainConfig {
        seed: seeds::derive_seed(train_config.seed, &[fold as u64]),
        ..train_config.clone()
    };
    let trained = train(&model_config, &train_config, &train_set, &validation_set, pre.vocab_size(), pre.static_dim())?;
    Ok(FoldModel {
        fold,
        vocabulary_hash: pre.vocabulary.hash(),
        preprocessor: pre,
        params: trained.model.params,
        log: trained.log,
    })
}

/// Trains one model per listed fold, in order.
pub fn train_folds(
    bundle: &Bundle,
    folds: &[usize],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    seed: u64,
) -> Result<Checkpoint, PipelineError> {
    model_config.validate()?;
    train_config.validate()?;
    let models = folds
        .iter()
        .map(|&k| train_fold(bundle, k, model_config, train_config))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Checkpoint {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: model_config.clone(),
        train_config: train_config.clone(),
        catalog_hash: bundle.manifest.catalog_hash.clone(),
        seed,
        folds: models,
    })
}

fn target(head: HeadKind, label: AcuityLabel, delirium: Option<bool>) -> Option<usize> {
    match head {
        HeadKind::FourClass => label.class_index(),
        HeadKind::BinaryDelirium => delirium.map(usize::from),
    }
}

fn scored(head: HeadKind, records: &[ShiftRecord], probabilities: Vec<Vec<f64>>) -> Vec<ScoredExample> {
    records
        .iter()
        .zip(probabilities)
        .filter_map(|(r, p)| {
            Some(ScoredExample {
                probabilities: p,
                target: target(head, r.label, r.binary_delirium_label)?,
                patient_id: r.patient_id.clone(),
            })
        })
        .collect()
}

/// Scores of the checkpoint's fold models.
pub struct TransformerScorer<'a> {
    pub bundle: &'a Bundle,
    pub checkpoint: &'a Checkpoint,
}

impl FoldScorer for TransformerScorer<'_> {
    type Error = PipelineError;

    fn score_fold(&self, fold: usize) -> Result<FoldPredictions, PipelineError> {
        check_fold(self.bundle, fold)?;
        let fm = self.checkpoint.fold(fold)?;
        let model = fm.model(&self.checkpoint.config)?;
        let head = self.checkpoint.config.head;
        let view = self.bundle.split.fold(fold);
        let cohort = self.bundle.cohort();
        let mut sets = Vec::with_capacity(2);
        for rows in [&view.validation, &view.test] {
            let records = fm.preprocessor.transform(&cohort, rows)?;
            let probs = predict_batch(&model, &records)?.into_iter().map(|p| p.probabilities).collect();
            sets.push(scored(head, &records, probs));
        }
        let test = sets.pop().expect("two sets");
        let validation = sets.pop().expect("two sets");
        Ok(FoldPredictions {
            fold,
            n_train: view.train.len(),
            validation,
            test,
        })
    }
}

/// Logistic regression on the aggregated window features, refit per fold.
pub struct LogisticScorer<'a> {
    pub bundle: &'a Bundle,
    pub head: HeadKind,
    pub config: LogisticConfig,
}

impl FoldScorer for LogisticScorer<'_> {
    type Error = PipelineError;

    fn score_fold(&self, fold: usize) -> Result<FoldPredictions, PipelineError> {
        check_fold(self.bundle, fold)?;
        let view = self.bundle.split.fold(fold);
        let cohort = self.bundle.cohort();
        let pre = TabularPreprocessor::fit(&cohort, &view.train, self.bundle.manifest.config.prevalence_threshold)?;
        let train_data = pre.transform(&cohort, &view.train)?;
        let (rows, targets): (Vec<Vec<f64>>, Vec<usize>) = train_data
            .rows
            .into_iter()
            .zip(train_data.labels.iter().zip(&train_data.delirium))
            .filter_map(|(x, (&l, &d))| Some((x, target(self.head, l, d)?)))
            .unzip();
        let model = fit_logistic(&rows, &targets, self.head, &self.config)?;
        let mut sets = Vec::with_capacity(2);
        for idx in [&view.validation, &view.test] {
            let data = pre.transform(&cohort, idx)?;
            let examples = data
                .rows
                .iter()
                .enumerate()
                .filter_map(|(i, x)| {
                    Some(ScoredExample {
                        probabilities: model.predict(x),
                        target: target(self.head, data.labels[i], data.delirium[i])?,
                        patient_id: data.patient_ids[i].clone(),
                    })
                })
                .collect();
            sets.push(examples);
        }
        let test = sets.pop().expect("two sets");
        let validation = sets.pop().expect("two sets");
        Ok(FoldPredictions {
            fold,
            n_train: view.train.len(),
            validation,
            test,
        })
    }
}

/// Reference scorers that ignore the features: `Oracle` puts all mass on
/// the true class, `Constant` scores every shift alike.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceKind {
    Oracle,
    Constant,
}

pub struct ReferenceScorer<'a> {
    pub bundle: &'a Bundle,
    pub head: HeadKind,
    pub kind: ReferenceKind,
}

impl ReferenceScorer<'_> {
    fn examples(&self, rows: &[usize]) -> Vec<ScoredExample> {
        let outputs = self.head.outputs();
        rows.iter()
            .filter_map(|&i| {
                let s = &self.bundle.shifts[i];
                let t = target(self.head, s.label, s.delirium)?;
                let probabilities = match (self.kind, self.head) {
                    (ReferenceKind::Constant, HeadKind::BinaryDelirium) => vec![0.5],
                    (ReferenceKind::Constant, _) => vec![1.0 / outputs as f64; outputs],
                    (ReferenceKind::Oracle, HeadKind::BinaryDelirium) => vec![t as f64],
                    (ReferenceKind::Oracle, _) => (0..outputs).map(|k| f64::from(u8::from(k == t))).collect(),
                };
                Some(ScoredExample {
                    probabilities,
                    target: t,
                    patient_id: s.patient_id.clone(),
                })
            })
            .collect()
    }
}

impl FoldScorer for ReferenceScorer<'_> {
    type Error = PipelineError;

    fn score_fold(&self, fold: usize) -> Result<FoldPredictions, PipelineError> {
        check_fold(self.bundle, fold)?;
        let view = self.bundle.split.fold(fold);
        Ok(FoldPredictions {
            fold,
            n_train: view.train.len(),
            validation: self.examples(&view.validation),
            test: self.examples(&view.test),
        })
    }
}
