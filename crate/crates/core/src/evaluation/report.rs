use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bootstrap::{bootstrap_values, percentile_interval, BootstrapConfig, Resampler};
use super::metrics::{pr_auc, pr_curve, roc_auc, roc_curve, select_threshold, threshold_metrics};
use super::multiclass::{class_names, evaluated_classes, one_vs_rest, recall_confusion, BinaryView, ClassSpec, ScoredExample};
use super::MetricError;
use crate::model::HeadKind;
use crate::seeds;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const METRIC_NAMES: [&str; 6] = ["auroc", "auprc", "sensitivity", "specificity", "ppv", "npv"];
pub const MEAN_KEY: &str = "mean";
/// Threshold used when the validation fold cannot support a Youden choice.
pub const FALLBACK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub bootstrap: BootstrapConfig,
    /// Count the normal class in the per-class results and the mean.
    pub include_normal: bool,
    pub seed: u64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            bootstrap: BootstrapConfig::default(),
            include_normal: false,
            seed: 0,
        }
    }
}

/// Scores produced by a model trained without one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPredictions {
    pub fold: usize,
    pub n_train: usize,
    pub validation: Vec<ScoredExample>,
    pub test: Vec<ScoredExample>,
}

/// Source of per-fold predictions for [`run_cv`].
pub trait FoldScorer: Sync {
    type Error: From<MetricError> + Send;
    fn score_fold(&self, fold: usize) -> Result<FoldPredictions, Self::Error>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSummary {
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Every bootstrap value, fold by fold.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldReport {
    pub fold: usize,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub thresholds: BTreeMap<String, f64>,
    pub validation_mean_auroc: Option<f64>,
    /// Metrics on the unresampled test set.
    pub test: BTreeMap<String, BTreeMap<String, Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub task: HeadKind,
    pub model: String,
    pub config_hash: String,
    pub seed: u64,
    pub bootstrap: BootstrapConfig,
    pub classes: Vec<String>,
    pub folds: Vec<FoldReport>,
    pub metrics: BTreeMap<String, BTreeMap<String, MetricSummary>>,
    pub confusion_labels: Vec<String>,
    /// Row-normalized, rows true class, pooled over the folds' test scores.
    pub confusion: Vec<Vec<Option<f64>>>,
    pub confusion_counts: Vec<Vec<usize>>,
    /// Metrics left undefined and other caveats.
    pub flags: Vec<String>,
}

/// Descriptive fields of a report that do not come from the scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportMeta {
    pub task: HeadKind,
    pub model: String,
    pub config_hash: String,
}

fn resampled(view: &BinaryView, idx: &[usize]) -> (Vec<f64>, Vec<bool>) {
    idx.iter().map(|&i| (view.scores[i], view.labels[i])).unzip()
}

fn metric_value(metric: &str, scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64, MetricError> {
    match metric {
        "auroc" => roc_auc(scores, labels),
        "auprc" => pr_auc(scores, labels),
        _ => {
            let m = threshold_metrics(scores, labels, threshold)?;
            let v = match metric {
                "sensitivity" => m.sensitivity,
                "specificity" => m.specificity,
                "ppv" => m.ppv,
                "npv" => m.npv,
                other => return Err(MetricError::Config(format!("unknown metric {other}"))),
            };
            v.ok_or(MetricError::Undefined)
        }
    }
}

/// Unweighted mean over classes on which the metric is defined.
fn mean_value(metric: &str, views: &[BinaryView], thresholds: &[f64], idx: Option<&[usize]>) -> Result<f64, MetricError> {
    let mut defined = Vec::with_capacity(views.len());
    for (view, &t) in views.iter().zip(thresholds) {
        let r = match idx {
            Some(idx) => {
                let (s, l) = resampled(view, idx);
                metric_value(metric, &s, &l, t)
            }
            None => metric_value(metric, &view.scores, &view.labels, t),
        };
        match r {
            Ok(v) => defined.push(v),
            Err(e @ (MetricError::Length { .. } | MetricError::NanScore)) => return Err(e),
            Err(_) => {}
        }
    }
    if defined.is_empty() {
        return Err(MetricError::Undefined);
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

struct FoldOutcome {
    report: FoldReport,
    values: BTreeMap<(String, String), Vec<f64>>,
    flags: Vec<String>,
}

fn evaluate_fold(p: &FoldPredictions, classes: &[ClassSpec], config: &EvaluationConfig) -> Result<FoldOutcome, MetricError> {
    let mut flags = Vec::new();
    let mut thresholds = Vec::with_capacity(classes.len());
    for c in classes {
        let v = BinaryView::new(&p.validation, c);
        match select_threshold(&v.scores, &v.labels) {
            Ok(t) => thresholds.push(t),
            Err(e @ (MetricError::Length { .. } | MetricError::NanScore)) => return Err(e),
            Err(_) => {
                flags.push(format!("fold {}: {} threshold fell back to {FALLBACK_THRESHOLD}", p.fold, c.name));
                thresholds.push(FALLBACK_THRESHOLD);
            }
        }
    }
    let views: Vec<BinaryView> = classes.iter().map(|c| BinaryView::new(&p.test, c)).collect();

    let mut test = BTreeMap::new();
    for (view, &t) in views.iter().zip(&thresholds) {
        let m = METRIC_NAMES
            .iter()
            .map(|&m| (m.to_string(), metric_value(m, &view.scores, &view.labels, t).ok()))
            .collect();
        test.insert(view.name.clone(), m);
    }
    test.insert(
        MEAN_KEY.to_string(),
        METRIC_NAMES
            .iter()
            .map(|&m| (m.to_string(), mean_value(m, &views, &thresholds, None).ok()))
            .collect(),
    );

    let resampler = if config.bootstrap.patient_level {
        let ids: Vec<&str> = p.test.iter().map(|e| e.patient_id.as_str()).collect();
        Resampler::patients(&ids)
    } else {
        Resampler::shifts(p.test.len())
    };
    let b = &config.bootstrap;
    let mut values = BTreeMap::new();
    let targets: Vec<(String, Option<usize>)> = views
        .iter()
        .enumerate()
        .map(|(i, v)| (v.name.clone(), Some(i)))
        .chain(std::iter::once((MEAN_KEY.to_string(), None)))
        .collect();
    for (name, which) in &targets {
        for &metric in &METRIC_NAMES {
            let mut rng = seeds::stream(config.seed, &[p.fold as u64, seeds::tag(name), seeds::tag(metric)]);
            let label = format!("{name}/{metric}");
            let r = bootstrap_values(&label, &resampler, b.iterations, b.max_retries, &mut rng, |idx| match which {
                Some(i) => {
                    let (s, l) = resampled(&views[*i], idx);
                    metric_value(metric, &s, &l, thresholds[*i])
                }
                None => mean_value(metric, &views, &thresholds, Some(idx)),
            });
            match r {
                Ok(v) => {
                    values.insert((name.clone(), metric.to_string()), v);
                }
                Err(MetricError::RetriesExhausted { .. }) => {
                    flags.push(format!("fold {}: {label} undefined on every resample", p.fold));
                }
                Err(e) => return Err(e),
            }
        }
    }

    let ovr = one_vs_rest(&p.validation, classes);
    Ok(FoldOutcome {
        report: FoldReport {
            fold: p.fold,
            n_train: p.n_train,
            n_validation: p.validation.len(),
            n_test: p.test.len(),
            thresholds: classes.iter().map(|c| c.name.clone()).zip(thresholds).collect(),
            validation_mean_auroc: ovr.mean_auroc,
            test,
        },
        values,
        flags,
    })
}

/// Thresholds each fold on its validation scores, bootstraps its test
/// scores and pools the repetition values of all folds per metric.
pub fn summarize_folds(predictions: &[FoldPredictions], meta: &ReportMeta, config: &EvaluationConfig) -> Result<MetricsReport, MetricError> {
    config.bootstrap.validate()?;
    if predictions.is_empty() {
        return Err(MetricError::Config("no folds to summarize".into()));
    }
    let classes = evaluated_classes(meta.task, config.include_normal);
    let mut ordered: Vec<&FoldPredictions> = predictions.iter().collect();
    ordered.sort_by_key(|p| p.fold);
    let outcomes: Vec<FoldOutcome> = ordered
        .par_iter()
        .map(|p| evaluate_fold(p, &classes, config))
        .collect::<Result<_, _>>()?;

    let mut flags: Vec<String> = outcomes.iter().flat_map(|o| o.flags.iter().cloned()).collect();
    let mut metrics: BTreeMap<String, BTreeMap<String, MetricSummary>> = BTreeMap::new();
    let names: Vec<String> = classes.iter().map(|c| c.name.clone()).chain([MEAN_KEY.to_string()]).collect();
    for name in &names {
        for &metric in &METRIC_NAMES {
            let key = (name.clone(), metric.to_string());
            if outcomes.iter().any(|o| !o.values.contains_key(&key)) {
                flags.push(format!("{name}/{metric} omitted: undefined in at least one fold"));
                continue;
            }
            let values: Vec<f64> = outcomes.iter().flat_map(|o| o.values[&key].iter().copied()).collect();
            let Some(i) = percentile_interval(&values, config.bootstrap.level) else {
                flags.push(format!("{name}/{metric} omitted: non-finite values"));
                continue;
            };
            metrics.entry(name.clone()).or_default().insert(
                metric.to_string(),
                MetricSummary {
                    point: i.point,
                    ci_low: i.ci_low,
                    ci_high: i.ci_high,
                    values,
                },
            );
        }
    }

    let pooled: Vec<ScoredExample> = ordered.iter().flat_map(|p| p.test.iter().cloned()).collect();
    let (confusion, confusion_counts) = recall_confusion(&pooled, meta.task.class_count());
    Ok(MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        task: meta.task,
        model: meta.model.clone(),
        config_hash: meta.config_hash.clone(),
        seed: config.seed,
        bootstrap: config.bootstrap.clone(),
        classes: classes.into_iter().map(|c| c.name).collect(),
        folds: outcomes.into_iter().map(|o| o.report).collect(),
        metrics,
        confusion_labels: class_names(meta.task),
        confusion,
        confusion_counts,
        flags,
    })
}

/// Scores every fold (in parallel) and summarizes them.
pub fn run_cv<S: FoldScorer>(scorer: &S, folds: usize, meta: &ReportMeta, config: &EvaluationConfig) -> Result<MetricsReport, S::Error> {
    let predictions: Vec<FoldPredictions> = (0..folds)
        .into_par_iter()
        .map(|k| scorer.score_fold(k))
        .collect::<Result<_, _>>()?;
    Ok(summarize_folds(&predictions, meta, config)?)
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn mean_auroc(&self) -> Option<f64> {
        self.metric(MEAN_KEY, "auroc").map(|m| m.point)
    }

    pub fn metric(&self, class: &str, metric: &str) -> Option<&MetricSummary> {
        self.metrics.get(class)?.get(metric)
    }

    /// One row per class and metric: `class,metric,point,ci_low,ci_high`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["class", "metric", "point", "ci_low", "ci_high"]).expect("in-memory write");
        for (class, m) in &self.metrics {
            for (name, s) in m {
                w.write_record([class.as_str(), name.as_str(), &s.point.to_string(), &s.ci_low.to_string(), &s.ci_high.to_string()])
                    .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// ROC and PR curve points of pooled test scores as CSV:
/// `class,curve,threshold,x,y` with x = FPR or recall, y = TPR or precision.
pub fn curves_csv(predictions: &[FoldPredictions], task: HeadKind, include_normal: bool) -> Result<String, MetricError> {
    let pooled: Vec<&ScoredExample> = predictions.iter().flat_map(|p| &p.test).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["class", "curve", "threshold", "x", "y"]).expect("in-memory write");
    for c in evaluated_classes(task, include_normal) {
        let v = BinaryView::new(pooled.iter().copied(), &c);
        for (curve, points) in [("roc", roc_curve(&v.scores, &v.labels)), ("pr", pr_curve(&v.scores, &v.labels))] {
            let Ok(points) = points else { continue };
            for (t, x, y) in points {
                w.write_record([c.name.as_str(), curve, &t.to_string(), &x.to_string(), &y.to_string()])
                    .expect("in-memory write");
            }
        }
    }
    Ok(String::from_utf8(w.into_inner().expect("flush")).expect("utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn synthetic(n: usize, seed: u64, oracle: bool) -> Vec<ScoredExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let target = rng.random_range(0..4);
                let probabilities = if oracle {
                    (0..4).map(|c| if c == target { 1.0 } else { 0.0 }).collect()
                } else {
                    vec![0.25; 4]
                };
                ScoredExample {
                    probabilities,
                    target,
                    patient_id: format!("p{}", i / 3),
                }
            })
            .collect()
    }

    fn folds(oracle: bool) -> Vec<FoldPredictions> {
        (0..5)
            .map(|k| FoldPredictions {
                fold: k,
                n_train: 100,
                validation: synthetic(200, 10 + k as u64, oracle),
                test: synthetic(400, 99, oracle),
            })
            .collect()
    }

    fn meta() -> ReportMeta {
        ReportMeta {
            task: HeadKind::FourClass,
            model: "test".into(),
            config_hash: "0".into(),
        }
    }

    #[test]
    fn oracle_report_is_perfect() {
        let r = summarize_folds(&folds(true), &meta(), &EvaluationConfig::default()).unwrap();
        for class in ["coma", "delirium", "dead", "mean"] {
            let m = r.metric(class, "auroc").unwrap();
            assert_eq!((m.point, m.ci_low, m.ci_high), (1.0, 1.0, 1.0));
            assert_eq!(m.values.len(), 50);
        }
        for (i, row) in r.confusion.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(*v, Some(if i == j { 1.0 } else { 0.0 }));
            }
        }
    }

    #[test]
    fn constant_model_has_chance_auroc() {
        let r = summarize_folds(&folds(false), &meta(), &EvaluationConfig::default()).unwrap();
        assert!((r.mean_auroc().unwrap() - 0.5).abs() <= 0.05);
        for m in r.metrics.values().flat_map(|m| m.values()) {
            assert_eq!(m.values.len(), 50);
            assert!(m.ci_low <= m.point && m.point <= m.ci_high);
        }
    }

    #[test]
    fn report_round_trips_and_is_deterministic() {
        let config = EvaluationConfig {
            seed: 4,
            ..Default::default()
        };
        let a = summarize_folds(&folds(false), &meta(), &config).unwrap().to_json();
        let b = summarize_folds(&folds(false), &meta(), &config).unwrap().to_json();
        assert_eq!(a, b);
        let parsed: MetricsReport = serde_json::from_str(&a).unwrap();
        assert_eq!(parsed.to_json(), a);
    }

    #[test]
    fn missing_class_is_flagged() {
        let mut f = folds(true);
        for p in &mut f {
            p.test.retain(|e| e.target != 3);
        }
        let r = summarize_folds(&f, &meta(), &EvaluationConfig::default()).unwrap();
        assert!(r.metric("dead", "auroc").is_none());
        assert!(r.flags.iter().any(|f| f.contains("dead/auroc")));
        assert_eq!(r.metric("mean", "auroc").unwrap().point, 1.0);
        assert_eq!(r.confusion[3], vec![None; 4]);
    }

    #[test]
    fn bootstrap_stabilizes_with_iterations() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 2000;
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let scores: Vec<f64> = labels.iter().map(|&l| rng.random::<f64>() + if l { 0.4 } else { 0.0 }).collect();
        let interval = |iterations| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let values = bootstrap_values("auroc", &Resampler::shifts(n), iterations, 100, &mut rng, |idx| {
                let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
                let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
                roc_auc(&s, &l)
            })
            .unwrap();
            percentile_interval(&values, 0.95).unwrap()
        };
        let (a, b) = (interval(200), interval(400));
        assert!((a.ci_low - b.ci_low).abs() < 0.01);
        assert!((a.ci_high - b.ci_high).abs() < 0.01);
    }

    #[test]
    fn binary_task_reports_delirium() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mk = |rng: &mut ChaCha8Rng, n| -> Vec<ScoredExample> {
            (0..n)
                .map(|i| {
                    let target = rng.random_range(0..2usize);
                    ScoredExample {
                        probabilities: vec![0.3 * target as f64 + 0.7 * rng.random::<f64>()],
                        target,
                        patient_id: i.to_string(),
                    }
                })
                .collect()
        };
        let f: Vec<FoldPredictions> = (0..2)
            .map(|k| FoldPredictions {
                fold: k,
                n_train: 1,
                validation: mk(&mut rng, 100),
                test: mk(&mut rng, 100),
            })
            .collect();
        let meta = ReportMeta {
            task: HeadKind::BinaryDelirium,
            ..meta()
        };
        let r = summarize_folds(&f, &meta, &EvaluationConfig::default()).unwrap();
        assert_eq!(r.classes, vec!["delirium"]);
        assert_eq!(r.metric("delirium", "auroc").unwrap().values.len(), 20);
        assert_eq!(r.confusion.len(), 2);
        let csv = curves_csv(&f, HeadKind::BinaryDelirium, false).unwrap();
        assert!(csv.lines().count() > 10);
    }
}
