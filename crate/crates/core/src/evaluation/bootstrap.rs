use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::MetricError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    /// Resamples per fold.
    pub iterations: usize,
    pub level: f64,
    /// Resample patients rather than shifts.
    pub patient_level: bool,
    /// Redraws allowed for a resample on which the metric is undefined.
    pub max_retries: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            iterations: 10,
            level: 0.95,
            patient_level: false,
            max_retries: 100,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<(), MetricError> {
        if self.iterations == 0 {
            return Err(MetricError::Config("bootstrap iterations must be positive".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(MetricError::Config(format!("confidence level {} outside (0, 1)", self.level)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Linearly interpolated percentile of sorted values, `q` in [0, 1].
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Mean of the values with the central `level` percentile interval. The
/// interval is widened to contain the mean if needed.
pub fn percentile_interval(values: &[f64], level: f64) -> Option<Interval> {
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let point = values.iter().sum::<f64>() / values.len() as f64;
    Some(Interval {
        point,
        ci_low: quantile(&sorted, tail).min(point),
        ci_high: quantile(&sorted, 1.0 - tail).max(point),
    })
}

/// Draws resamples of indices `0..n`, grouped by `groups` when given.
pub struct Resampler {
    n: usize,
    groups: Option<Vec<Vec<usize>>>,
}

impl Resampler {
    pub fn shifts(n: usize) -> Self {
        Resampler { n, groups: None }
    }

    pub fn patients<S: AsRef<str>>(ids: &[S]) -> Self {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, id) in ids.iter().enumerate() {
            groups.entry(id.as_ref()).or_default().push(i);
        }
        Resampler {
            n: ids.len(),
            groups: Some(groups.into_values().collect()),
        }
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        match &self.groups {
            None => (0..self.n).map(|_| rng.random_range(0..self.n)).collect(),
            Some(groups) => {
                let mut out = Vec::with_capacity(self.n);
                for _ in 0..groups.len() {
                    out.extend_from_slice(&groups[rng.random_range(0..groups.len())]);
                }
                out
            }
        }
    }
}

/// `iterations` values of `metric` on resamples, redrawing a resample on
/// which the metric is undefined.
pub fn bootstrap_values<R, F>(
    metric_name: &str,
    resampler: &Resampler,
    iterations: usize,
    max_retries: usize,
    rng: &mut R,
    metric: F,
) -> Result<Vec<f64>, MetricError>
where
    R: Rng,
    F: Fn(&[usize]) -> Result<f64, MetricError>,
{
    if resampler.n == 0 {
        return Err(MetricError::RetriesExhausted {
            metric: metric_name.to_string(),
            retries: 0,
        });
    }
    let mut values = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let mut attempts = 0;
        loop {
            let idx = resampler.draw(rng);
            match metric(&idx) {
                Ok(v) => {
                    values.push(v);
                    break;
                }
                Err(e @ (MetricError::Length { .. } | MetricError::NanScore)) => return Err(e),
                Err(_) if attempts < max_retries => attempts += 1,
                Err(_) => {
                    return Err(MetricError::RetriesExhausted {
                        metric: metric_name.to_string(),
                        retries: max_retries,
                    })
                }
            }
        }
    }
    Ok(values)
}

/// Single-sample bootstrap estimate: the mean and percentile interval of
/// `iterations` resampled values of `metric`.
pub fn bootstrap_ci<R, F>(
    metric_name: &str,
    n: usize,
    config: &BootstrapConfig,
    rng: &mut R,
    metric: F,
) -> Result<(Interval, Vec<f64>), MetricError>
where
    R: Rng,
    F: Fn(&[usize]) -> Result<f64, MetricError>,
{
    config.validate()?;
    let values = bootstrap_values(metric_name, &Resampler::shifts(n), config.iterations, config.max_retries, rng, metric)?;
    let interval = percentile_interval(&values, config.level).ok_or(MetricError::NanScore)?;
    Ok((interval, values))
}
