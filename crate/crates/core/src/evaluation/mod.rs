//! Metrics, per-fold bootstrap confidence intervals and cross-validated
//! reports.

pub mod bootstrap;
pub mod metrics;
pub mod multiclass;
pub mod report;

use thiserror::Error;

pub use bootstrap::{bootstrap_ci, bootstrap_values, percentile_interval, BootstrapConfig, Interval, Resampler};
pub use metrics::{pr_auc, roc_auc, select_threshold, threshold_metrics, ThresholdMetrics};
pub use multiclass::{evaluated_classes, one_vs_rest, recall_confusion, BinaryView, ClassSpec, OneVsRest, ScoredExample};
pub use report::{
    curves_csv, run_cv, summarize_folds, EvaluationConfig, FoldPredictions, FoldReport, FoldScorer, MetricSummary, MetricsReport, ReportMeta,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("metric undefined: only one class present")]
    SingleClass,
    #[error("metric undefined: no positive examples")]
    NoPositives,
    #[error("metric undefined: empty denominator")]
    Undefined,
    #[error("{scores} scores for {labels} labels")]
    Length { scores: usize, labels: usize },
    #[error("NaN score")]
    NanScore,
    #[error("metric {metric} stayed undefined after {retries} resamples")]
    RetriesExhausted { metric: String, retries: usize },
    #[error("invalid evaluation configuration: {0}")]
    Config(String),
}
