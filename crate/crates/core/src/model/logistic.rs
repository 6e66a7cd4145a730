//! Weighted multinomial (or binary) logistic regression on aggregated
//! window features.

use serde::{Deserialize, Serialize};

use super::train::class_weights;
use super::{HeadKind, ModelError};
use crate::linalg::{dot, softmax_in_place, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogisticConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub class_weight_cap: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            iterations: 300,
            learning_rate: 0.05,
            l2: 1e-4,
            class_weight_cap: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub head: HeadKind,
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl LogisticModel {
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let mut z: Vec<f64> = (0..self.weights.rows).map(|k| dot(self.weights.row(k), x) + self.bias[k]).collect();
        match self.head {
            HeadKind::FourClass => softmax_in_place(&mut z),
            HeadKind::BinaryDelirium => z[0] = 1.0 / (1.0 + (-z[0]).exp()),
        }
        z
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, t: i32) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grads[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grads[i] * grads[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
        }
    }
}

/// Full-batch Adam on the class-weighted mean cross-entropy plus an L2
/// penalty on the weights.
pub fn fit_logistic(rows: &[Vec<f64>], targets: &[usize], head: HeadKind, config: &LogisticConfig) -> Result<LogisticModel, ModelError> {
    if rows.is_empty() {
        return Err(ModelError::EmptySet("training"));
    }
    if rows.len() != targets.len() {
        return Err(ModelError::Shape(format!("{} rows for {} targets", rows.len(), targets.len())));
    }
    let p = rows[0].len();
    if rows.iter().any(|r| r.len() != p) {
        return Err(ModelError::Shape("ragged feature rows".into()));
    }
    let k = head.outputs();
    let classes = head.class_count();
    if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
        return Err(ModelError::Shape(format!("target {t} outside {classes} classes")));
    }
    let mut counts = vec![0usize; classes];
    for &t in targets {
        counts[t] += 1;
    }
    let weights = class_weights(&counts, config.class_weight_cap);
    let mut model = LogisticModel {
        head,
        weights: Matrix::zeros(k, p),
        bias: vec![0.0; k],
    };
    let mut mw = Moments::new(k * p);
    let mut mb = Moments::new(k);
    let scale = 1.0 / rows.len() as f64;
    for it in 1..=config.iterations {
        let mut gw = vec![0.0; k * p];
        let mut gb = vec![0.0; k];
        for (x, &t) in rows.iter().zip(targets) {
            let probs = model.predict(x);
            let w = weights[t] * scale;
            for c in 0..k {
                let y = match head {
                    HeadKind::FourClass => f64::from(c == t),
                    HeadKind::BinaryDelirium => t as f64,
                };
                let g = w * (probs[c] - y);
                gb[c] += g;
                for (gi, xi) in gw[c * p..(c + 1) * p].iter_mut().zip(x) {
                    *gi += g * xi;
                }
            }
        }
        for (g, w) in gw.iter_mut().zip(&model.weights.data) {
            *g += config.l2 * w;
        }
        mw.step(&mut model.weights.data, &gw, config.learning_rate, it as i32);
        mb.step(&mut model.bias, &gb, config.learning_rate, it as i32);
        if !model.weights.is_finite() || model.bias.iter().any(|b| !b.is_finite()) {
            return Err(ModelError::NonFinite { layer: 0 });
        }
    }
    Ok(model)
}
