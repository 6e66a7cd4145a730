use serde::{Deserialize, Serialize};

use super::metrics::roc_auc;
use crate::model::{HeadKind, PredictionOutput};
use crate::phenotype::AcuityLabel;

/// Model output for one shift alongside its true class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    pub probabilities: Vec<f64>,
    pub target: usize,
    pub patient_id: String,
}

impl ScoredExample {
    pub fn predicted_class(&self) -> usize {
        PredictionOutput::from_probabilities(self.probabilities.clone()).predicted_class
    }
}

/// A class evaluated one-vs-rest: examples with `target` are positive and
/// are scored by `probabilities[score_index]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub target: usize,
    pub score_index: usize,
}

/// Coma, delirium and mortality for the four-class head (plus normal when
/// asked), delirium alone for the binary head.
pub fn evaluated_classes(head: HeadKind, include_normal: bool) -> Vec<ClassSpec> {
    match head {
        HeadKind::FourClass => {
            let mut labels = vec![AcuityLabel::Coma, AcuityLabel::Delirium, AcuityLabel::Dead];
            if include_normal {
                labels.insert(0, AcuityLabel::Normal);
            }
            labels
                .into_iter()
                .map(|l| {
                    let c = l.class_index().expect("trainable label");
                    ClassSpec {
                        name: l.as_str().to_string(),
                        target: c,
                        score_index: c,
                    }
                })
                .collect()
        }
        HeadKind::BinaryDelirium => vec![ClassSpec {
            name: "delirium".into(),
            target: 1,
            score_index: 0,
        }],
    }
}

pub fn class_names(head: HeadKind) -> Vec<String> {
    match head {
        HeadKind::FourClass => AcuityLabel::CLASSES.iter().map(|l| l.as_str().to_string()).collect(),
        HeadKind::BinaryDelirium => vec!["no_delirium".into(), "delirium".into()],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryView {
    pub name: String,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl BinaryView {
    pub fn new<'a, I: IntoIterator<Item = &'a ScoredExample>>(examples: I, class: &ClassSpec) -> Self {
        let (scores, labels) = examples
            .into_iter()
            .map(|e| (e.probabilities[class.score_index], e.target == class.target))
            .unzip();
        BinaryView {
            name: class.name.clone(),
            scores,
            labels,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneVsRest {
    pub views: Vec<BinaryView>,
    pub aurocs: Vec<Option<f64>>,
    /// Unweighted mean over classes whose AUROC is defined.
    pub mean_auroc: Option<f64>,
    /// Classes left out of the mean.
    pub undefined: Vec<String>,
}

pub fn one_vs_rest(examples: &[ScoredExample], classes: &[ClassSpec]) -> OneVsRest {
    let views: Vec<BinaryView> = classes.iter().map(|c| BinaryView::new(examples, c)).collect();
    let aurocs: Vec<Option<f64>> = views.iter().map(|v| roc_auc(&v.scores, &v.labels).ok()).collect();
    let defined: Vec<f64> = aurocs.iter().flatten().copied().collect();
    let undefined = views
        .iter()
        .zip(&aurocs)
        .filter(|(_, a)| a.is_none())
        .map(|(v, _)| v.name.clone())
        .collect();
    OneVsRest {
        mean_auroc: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        views,
        aurocs,
        undefined,
    }
}

/// Row-normalized confusion matrix (rows true class, columns predicted
/// class) and the raw counts. Rows of absent classes are `None`.
pub fn recall_confusion(examples: &[ScoredExample], n_classes: usize) -> (Vec<Vec<Option<f64>>>, Vec<Vec<usize>>) {
    let mut counts = vec![vec![0usize; n_classes]; n_classes];
    for e in examples {
        let p = e.predicted_class();
        if e.target < n_classes && p < n_classes {
            counts[e.target][p] += 1;
        }
    }
    let matrix = counts
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter()
                .map(|&c| (total > 0).then(|| c as f64 / total as f64))
                .collect()
        })
        .collect();
    (matrix, counts)
}
