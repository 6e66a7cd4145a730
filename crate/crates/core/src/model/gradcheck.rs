//! Central finite-difference check of the analytic gradients.

use rand::seq::index::sample;
use rayon::prelude::*;

use super::forward::{backward, forward_cached, sample_loss};
use super::{Model, ModelError};
use crate::encoding::ObservationTriplet;
use crate::seeds;

pub struct CheckSample<'a> {
    pub window: &'a [ObservationTriplet],
    pub static_vector: &'a [f64],
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub tensor: String,
    pub checked: usize,
    pub max_relative_error: f64,
}

type NoRng = rand_chacha::ChaCha8Rng;

/// Mean weighted loss of a batch without dropout.
pub fn batch_loss(model: &Model, batch: &[CheckSample<'_>], weights: &[f64]) -> Result<f64, ModelError> {
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for s in batch {
        let c = forward_cached::<NoRng>(model, s.window, s.static_vector, None)?;
        total += sample_loss(model.config.head, &c.probabilities, s.target, weights[s.target], scale).0;
    }
    Ok(total)
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares analytic and central-difference gradients of [`batch_loss`]
/// tensor by tensor. With `max_entries`, each larger tensor is checked on
/// that many entries drawn with `seed`.
pub fn check_gradients(
    model: &Model,
    batch: &[CheckSample<'_>],
    weights: &[f64],
    epsilon: f64,
    max_entries: Option<usize>,
    seed: u64,
) -> Result<Vec<TensorCheck>, ModelError> {
    let mut grads = model.params.zeros_like();
    let scale = 1.0 / batch.len() as f64;
    for s in batch {
        let c = forward_cached::<NoRng>(model, s.window, s.static_vector, None)?;
        let (_, dlogits) = sample_loss(model.config.head, &c.probabilities, s.target, weights[s.target], scale);
        backward(model, &c, &dlogits, &mut grads);
    }
    let analytic: Vec<(String, Vec<f64>)> = grads.tensors().into_iter().map(|(n, t)| (n, t.to_vec())).collect();

    let mut out = Vec::with_capacity(analytic.len());
    for (k, (name, grad)) in analytic.iter().enumerate() {
        let entries: Vec<usize> = match max_entries {
            Some(m) if grad.len() > m => {
                let mut rng = seeds::stream(seed, &[seeds::tag(name)]);
                let mut v = sample(&mut rng, grad.len(), m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..grad.len()).collect(),
        };
        let errors: Vec<f64> = entries
            .par_iter()
            .map_init(
                || model.clone(),
                |m, &i| {
                    let original = m.params.tensors_mut()[k].1[i];
                    m.params.tensors_mut()[k].1[i] = original + epsilon;
                    let plus = batch_loss(m, batch, weights)?;
                    m.params.tensors_mut()[k].1[i] = original - epsilon;
                    let minus = batch_loss(m, batch, weights)?;
                    m.params.tensors_mut()[k].1[i] = original;
                    Ok(relative_error(grad[i], (plus - minus) / (2.0 * epsilon)))
                },
            )
            .collect::<Result<_, ModelError>>()?;
        out.push(TensorCheck {
            tensor: name.clone(),
            checked: entries.len(),
            max_relative_error: errors.iter().copied().fold(0.0, f64::max),
        });
    }
    Ok(out)
}
