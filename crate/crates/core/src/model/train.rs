use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::{backward, forward_cached, sample_loss, Gradients};
use super::params::ModelParams;
use super::{HeadKind, Model, ModelConfig, ModelError, PredictionOutput};
use crate::etl::ShiftRecord;
use crate::evaluation::{evaluated_classes, one_vs_rest, ScoredExample};
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Train on a fresh random subset of this size each epoch.
    pub max_samples_per_epoch: Option<usize>,
    /// Select epochs on a fixed random subset of this size of the validation
    /// set.
    pub max_validation_samples: Option<usize>,
    pub class_weight_cap: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Samples per parallel gradient task; fixes the reduction order.
    pub chunk_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 30,
            patience: 5,
            max_samples_per_epoch: None,
            max_validation_samples: None,
            class_weight_cap: 10.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            chunk_size: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.batch_size == 0 || self.chunk_size == 0 {
            return bad("batch_size and chunk_size must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        if self.max_samples_per_epoch == Some(0) || self.max_validation_samples == Some(0) {
            return bad("max_samples_per_epoch and max_validation_samples must be positive");
        }
        if !(self.class_weight_cap >= 1.0) {
            return bad("class_weight_cap must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("Adam betas must lie in [0, 1) and epsilon be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub samples: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub validation_mean_auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub class_weights: Vec<f64>,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Model,
    pub log: TrainingLog,
}

/// Inverse-frequency weights `min(cap, n_max / n_c)`; absent classes get the
/// cap.
pub fn class_weights(counts: &[usize], cap: f64) -> Vec<f64> {
    let max = counts.iter().copied().max().unwrap_or(0) as f64;
    counts
        .iter()
        .map(|&n| if n == 0 { cap } else { (max / n as f64).min(cap) })
        .collect()
}

pub struct Adam {
    m: ModelParams,
    v: ModelParams,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    pub fn new(params: &ModelParams, config: &TrainConfig) -> Self {
        Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (self.beta1, self.beta2);
        for ((((_, p), (_, m)), (_, v)), (_, g)) in params
            .tensors_mut()
            .into_iter()
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(grads.tensors())
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.epsilon);
            }
        }
    }
}

/// Records with a target under `head`, paired with it.
pub fn targeted(head: HeadKind, records: &[ShiftRecord]) -> Vec<(&ShiftRecord, usize)> {
    records.iter().filter_map(|r| head.target(r).map(|t| (r, t))).collect()
}

/// Weighted mean loss and its gradient over `batch`, computed in fixed
/// chunks (in parallel) and reduced in chunk order.
pub fn batch_gradient(
    model: &Model,
    batch: &[(&ShiftRecord, usize, u64)],
    weights: &[f64],
    chunk_size: usize,
    dropout_seed: Option<(u64, u64)>,
) -> Result<(f64, Gradients), ModelError> {
    let scale = 1.0 / batch.len() as f64;
    let head = model.config.head;
    let partials: Vec<(f64, Gradients)> = batch
        .par_chunks(chunk_size)
        .map(|chunk| {
            let mut grads = model.params.zeros_like();
            let mut total = 0.0;
            for &(record, target, sample) in chunk {
                let cache = match dropout_seed {
                    Some((seed, epoch)) => {
                        let mut rng = seeds::stream(seed, &[seeds::tag("dropout"), epoch, sample]);
                        forward_cached(model, &record.window, &record.static_vector, Some(&mut rng))?
                    }
                    None => forward_cached::<rand_chacha::ChaCha8Rng>(model, &record.window, &record.static_vector, None)?,
                };
                let (l, dlogits) = sample_loss(head, &cache.probabilities, target, weights[target], scale);
                total += l;
                backward(model, &cache, &dlogits, &mut grads);
            }
            Ok((total, grads))
        })
        .collect::<Result<_, ModelError>>()?;
    let mut iter = partials.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        grads.add_scaled(1.0, &g);
    }
    Ok((loss, grads))
}

fn predict_targeted(model: &Model, set: &[(&ShiftRecord, usize)]) -> Result<Vec<PredictionOutput>, ModelError> {
    set.par_iter()
        .map(|(r, _)| {
            let c = forward_cached::<rand_chacha::ChaCha8Rng>(model, &r.window, &r.static_vector, None)?;
            Ok(PredictionOutput::from_probabilities(c.probabilities))
        })
        .collect()
}

fn validation_scores(model: &Model, set: &[(&ShiftRecord, usize)], weights: &[f64]) -> Result<(f64, Option<f64>), ModelError> {
    let head = model.config.head;
    let preds = predict_targeted(model, set)?;
    let scale = 1.0 / set.len() as f64;
    let loss: f64 = preds
        .iter()
        .zip(set)
        .map(|(p, (_, t))| sample_loss(head, &p.probabilities, *t, weights[*t], scale).0)
        .sum();
    let examples: Vec<ScoredExample> = preds
        .into_iter()
        .zip(set)
        .map(|(p, (r, t))| ScoredExample {
            probabilities: p.probabilities,
            target: *t,
            patient_id: r.patient_id.clone(),
        })
        .collect();
    let ovr = one_vs_rest(&examples, &evaluated_classes(head, false));
    Ok((loss, ovr.mean_auroc))
}

fn diverged(epoch: usize, log: &TrainingLog) -> ModelError {
    ModelError::Diverged {
        epoch,
        log: Box::new(log.clone()),
    }
}

/// Trains a fresh model with Adam and early stopping on validation mean
/// AUROC (ties and undefined AUROC fall to validation loss), returning the
/// best epoch's parameters.
pub fn train(
    config: &ModelConfig,
    train_config: &TrainConfig,
    train_set: &[ShiftRecord],
    validation_set: &[ShiftRecord],
    vocab_size: usize,
    static_dim: usize,
) -> Result<TrainedModel, ModelError> {
    train_config.validate()?;
    let model = Model::new(config.clone(), vocab_size, static_dim)?;
    train_from(model, train_config, train_set, validation_set)
}

/// [`train`] starting from existing parameters.
pub fn train_from(
    mut model: Model,
    train_config: &TrainConfig,
    train_set: &[ShiftRecord],
    validation_set: &[ShiftRecord],
) -> Result<TrainedModel, ModelError> {
    train_config.validate()?;
    let head = model.config.head;
    let train: Vec<(&ShiftRecord, usize)> = targeted(head, train_set);
    let mut validation: Vec<(&ShiftRecord, usize)> = targeted(head, validation_set);
    if let Some(m) = train_config.max_validation_samples.filter(|&m| m < validation.len()) {
        let mut keep: Vec<usize> = (0..validation.len()).collect();
        keep.shuffle(&mut seeds::stream(train_config.seed, &[seeds::tag("validation")]));
        keep.truncate(m);
        keep.sort_unstable();
        validation = keep.into_iter().map(|i| validation[i]).collect();
    }
    if train.is_empty() {
        return Err(ModelError::EmptySet("training"));
    }
    if validation.is_empty() {
        return Err(ModelError::EmptySet("validation"));
    }
    let mut counts = vec![0usize; head.class_count()];
    for &(_, t) in &train {
        counts[t] += 1;
    }
    let weights = class_weights(&counts, train_config.class_weight_cap);
    let mut log = TrainingLog {
        class_weights: weights.clone(),
        ..Default::default()
    };
    let mut adam = Adam::new(&model.params, train_config);
    let dropout = model.config.dropout > 0.0;

    let mut best: Option<((f64, f64), ModelParams)> = None;
    let mut since_best = 0;
    let per_epoch = train_config.max_samples_per_epoch.unwrap_or(train.len()).min(train.len());
    for epoch in 0..train_config.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seeds::stream(train_config.seed, &[seeds::tag("shuffle"), epoch as u64]));
        order.truncate(per_epoch);

        let mut epoch_loss = 0.0;
        for batch_idx in order.chunks(train_config.batch_size) {
            let batch: Vec<(&ShiftRecord, usize, u64)> = batch_idx.iter().map(|&i| (train[i].0, train[i].1, i as u64)).collect();
            let result = batch_gradient(
                &model,
                &batch,
                &weights,
                train_config.chunk_size,
                dropout.then_some((train_config.seed, epoch as u64)),
            );
            let (loss, grads) = match result {
                Ok(r) => r,
                Err(ModelError::NonFinite { .. }) => return Err(diverged(epoch, &log)),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || !grads.is_finite() {
                return Err(diverged(epoch, &log));
            }
            epoch_loss += loss * batch.len() as f64;
            adam.step(&mut model.params, &grads);
        }

        let (validation_loss, validation_mean_auroc) = match validation_scores(&model, &validation, &weights) {
            Ok(v) => v,
            Err(ModelError::NonFinite { .. }) => return Err(diverged(epoch, &log)),
            Err(e) => return Err(e),
        };
        log.epochs.push(EpochLog {
            epoch,
            samples: per_epoch,
            train_loss: epoch_loss / per_epoch as f64,
            validation_loss,
            validation_mean_auroc,
        });
        if !validation_loss.is_finite() {
            return Err(diverged(epoch, &log));
        }
        let score = (validation_mean_auroc.unwrap_or(f64::NEG_INFINITY), -validation_loss);
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, model.params.clone()));
            log.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= train_config.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok(TrainedModel { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::ObservationTriplet;
    use crate::phenotype::AcuityLabel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weights_are_capped_inverse_frequency() {
        assert_eq!(class_weights(&[100, 50, 5, 1], 10.0), vec![1.0, 2.0, 10.0, 10.0]);
        assert_eq!(class_weights(&[10, 0], 10.0), vec![1.0, 10.0]);
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d: 8,
            layers: 1,
            heads: 2,
            ffn_hidden: 8,
            static_hidden: 4,
            dropout: 0.0,
            seed: 1,
            ..ModelConfig::default()
        }
    }

    fn records(n: usize, seed: u64) -> Vec<ShiftRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = AcuityLabel::CLASSES[i % 4];
                let window = (0..3)
                    .map(|_| ObservationTriplet {
                        t: rng.random(),
                        f: rng.random_range(0..4),
                        v: rng.random::<f64>() - 0.5 + i as f64 % 4.0,
                    })
                    .collect();
                ShiftRecord {
                    patient_id: format!("p{i}"),
                    stay_id: format!("s{i}"),
                    shift_index: 0,
                    window,
                    static_vector: vec![rng.random(), (i % 4) as f64],
                    label,
                    binary_delirium_label: Some(label == AcuityLabel::Delirium),
                }
            })
            .collect()
    }

    #[test]
    fn overfits_eight_samples() {
        let data = records(8, 2);
        let tc = TrainConfig {
            learning_rate: 0.01,
            batch_size: 8,
            max_epochs: 300,
            patience: 300,
            ..Default::default()
        };
        let trained = train(&tiny_config(), &tc, &data, &data, 4, 2).unwrap();
        let preds = crate::model::predict_batch(&trained.model, &data).unwrap();
        for (p, r) in preds.iter().zip(&data) {
            assert_eq!(p.predicted_label(), Some(r.label));
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = records(16, 3);
        let tc = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 2,
            ..Default::default()
        };
        let trained = train(&tiny_config(), &tc, &data, &data, 4, 2).unwrap();
        let fresh = Model::new(tiny_config(), 4, 2).unwrap();
        assert_eq!(trained.model.params, fresh.params);
    }

    #[test]
    fn training_is_deterministic() {
        let data = records(40, 4);
        let config = ModelConfig {
            dropout: 0.2,
            ..tiny_config()
        };
        let tc = TrainConfig {
            batch_size: 16,
            max_epochs: 3,
            seed: 9,
            ..Default::default()
        };
        let a = train(&config, &tc, &data, &data, 4, 2).unwrap();
        let b = train(&config, &tc, &data, &data, 4, 2).unwrap();
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn validation_subset_only_changes_selection_scores() {
        let data = records(40, 8);
        let tc = TrainConfig {
            batch_size: 8,
            max_epochs: 1,
            ..Default::default()
        };
        let full = train(&tiny_config(), &tc, &data, &data, 4, 2).unwrap();
        let all = TrainConfig {
            max_validation_samples: Some(40),
            ..tc.clone()
        };
        assert_eq!(train(&tiny_config(), &all, &data, &data, 4, 2).unwrap().log, full.log);
        let some = TrainConfig {
            max_validation_samples: Some(12),
            ..tc
        };
        let sub = train(&tiny_config(), &some, &data, &data, 4, 2).unwrap();
        assert_eq!(sub.model.params, full.model.params);
        assert_eq!(sub.log.epochs[0].train_loss, full.log.epochs[0].train_loss);
        assert_ne!(sub.log.epochs[0].validation_loss, full.log.epochs[0].validation_loss);
    }

    #[test]
    fn huge_learning_rate_diverges_with_log() {
        let data = records(32, 5);
        let tc = TrainConfig {
            learning_rate: 1e300,
            batch_size: 8,
            max_epochs: 5,
            ..Default::default()
        };
        match train(&tiny_config(), &tc, &data, &data, 4, 2) {
            Err(ModelError::Diverged { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|t| t.log)),
        }
    }

    #[test]
    fn empty_sets_are_rejected() {
        let data = records(4, 6);
        let tc = TrainConfig::default();
        assert!(matches!(train(&tiny_config(), &tc, &[], &data, 4, 2), Err(ModelError::EmptySet("training"))));
        assert!(matches!(train(&tiny_config(), &tc, &data, &[], 4, 2), Err(ModelError::EmptySet("validation"))));
    }

    #[test]
    fn binary_head_trains() {
        let data = records(24, 7);
        let config = ModelConfig {
            head: HeadKind::BinaryDelirium,
            ..tiny_config()
        };
        let tc = TrainConfig {
            max_epochs: 2,
            ..Default::default()
        };
        let trained = train(&config, &tc, &data, &data, 4, 2).unwrap();
        assert_eq!(trained.log.class_weights.len(), 2);
        assert_eq!(trained.log.epochs.len(), 2);
    }
}
