//! Binary ranking and threshold metrics.

use serde::{Deserialize, Serialize};

use super::MetricError;

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::Length {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MetricError::NanScore);
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by ascending score.
fn ascending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    order
}

/// Probability that a random positive scores above a random negative, ties
/// counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let order = ascending(scores);
    // Twice the Mann-Whitney U statistic, kept integral.
    let mut u2: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut gp, mut gn) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                gp += 1;
            } else {
                gn += 1;
            }
            j += 1;
        }
        u2 += 2 * neg_below * gp + gp * gn;
        neg_below += gn;
        i = j;
    }
    Ok(u2 as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Average precision: precision at each distinct score threshold weighted by
/// the recall gained there.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    let (pos, _) = check(scores, labels)?;
    if pos == 0 {
        return Err(MetricError::NoPositives);
    }
    let mut order = ascending(scores);
    order.reverse();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut gained = 0usize;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                gained += 1;
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        if gained > 0 {
            ap += (gained as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
        i = j;
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
}

fn ratio(a: usize, b: usize) -> Option<f64> {
    (a + b > 0).then(|| a as f64 / (a + b) as f64)
}

/// Confusion counts with predicted positive iff `score >= threshold`;
/// ratios with an empty denominator are `None`.
pub fn threshold_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ThresholdMetrics, MetricError> {
    check(scores, labels)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(ThresholdMetrics {
        tp,
        fp,
        tn,
        fn_,
        sensitivity: ratio(tp, fn_),
        specificity: ratio(tn, fp),
        ppv: ratio(tp, fp),
        npv: ratio(tn, fn_),
    })
}

/// Youden's J maximizer. Each distinct score `s_k` stands for the interval
/// of thresholds `(s_{k+1}, s_k]` that classify identically; ties between
/// intervals go to the lower one, and the midpoint of the chosen interval is
/// returned (the score itself for the lowest interval).
pub fn select_threshold(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut order = ascending(scores);
    order.reverse();
    let mut distinct: Vec<(f64, usize, usize)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        distinct.push((s, tp, fp));
    }
    let mut best = 0;
    let mut best_j = f64::NEG_INFINITY;
    for (k, &(_, tp, fp)) in distinct.iter().enumerate() {
        let j = tp as f64 / pos as f64 + (neg - fp) as f64 / neg as f64 - 1.0;
        if j >= best_j {
            best_j = j;
            best = k;
        }
    }
    let upper = distinct[best].0;
    Ok(match distinct.get(best + 1) {
        Some(&(lower, _, _)) => 0.5 * (upper + lower),
        None => upper,
    })
}

/// Youden's J of a threshold.
pub fn youden(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64, MetricError> {
    let m = threshold_metrics(scores, labels, threshold)?;
    match (m.sensitivity, m.specificity) {
        (Some(a), Some(b)) => Ok(a + b - 1.0),
        _ => Err(MetricError::SingleClass),
    }
}

/// Threshold-sweep points `(threshold, fpr, tpr)` from the strictest threshold down.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64, f64)>, MetricError> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut order = ascending(scores);
    order.reverse();
    let mut out = vec![(f64::INFINITY, 0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((s, fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(out)
}

/// Threshold-sweep points `(threshold, recall, precision)`.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64, f64)>, MetricError> {
    let (pos, _) = check(scores, labels)?;
    if pos == 0 {
        return Err(MetricError::NoPositives);
    }
    let mut order = ascending(scores);
    order.reverse();
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((s, tp as f64 / pos as f64, tp as f64 / (tp + fp) as f64));
    }
    Ok(out)
}
