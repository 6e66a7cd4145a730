use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::EtlError;
use crate::phenotype::ScoreKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariableKind {
    Vital,
    Lab,
    Medication,
    Score,
}

impl VariableKind {
    /// Labs and medications are subject to the prevalence filter.
    pub fn is_filterable(self) -> bool {
        matches!(self, VariableKind::Lab | VariableKind::Medication)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub kind: VariableKind,
    pub unit: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StaticKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaticSpec {
    pub name: String,
    pub kind: StaticKind,
}

/// Lowercases and collapses whitespace and hyphens to `_`, so that
/// `"Heart Rate"`, `"heart-rate"` and `"HEART_RATE"` name the same variable.
pub fn canonical_name(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut pending_sep = false;
    for ch in raw.trim().chars() {
        if ch.is_whitespace() || ch == '-' || ch == '_' {
            pending_sep = !out.is_empty();
        } else {
            if pending_sep {
                out.push('_');
                pending_sep = false;
            }
            out.extend(ch.to_lowercase());
        }
    }
    out
}

pub fn canonical_unit(raw: &str) -> String {
    raw.trim().to_lowercase().split_whitespace().collect::<Vec<_>>().join("")
}

/// Declared variables of a data source: temporal variables with their
/// expected unit, and static patient characteristics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    pub temporal: Vec<VariableSpec>,
    #[serde(rename = "static")]
    pub static_vars: Vec<StaticSpec>,
}

impl Catalog {
    pub fn new(temporal: Vec<VariableSpec>, static_vars: Vec<StaticSpec>) -> Result<Self, EtlError> {
        let mut catalog = Catalog {
            temporal,
            static_vars,
        };
        for v in &mut catalog.temporal {
            v.name = canonical_name(&v.name);
            v.unit = canonical_unit(&v.unit);
        }
        for s in &mut catalog.static_vars {
            s.name = canonical_name(&s.name);
        }
        let mut seen = BTreeSet::new();
        for name in catalog.temporal.iter().map(|v| &v.name) {
            if !seen.insert(name.clone()) {
                return Err(EtlError::Catalog(format!("duplicate temporal variable {name:?}")));
            }
        }
        let mut seen = BTreeSet::new();
        for name in catalog.static_vars.iter().map(|v| &v.name) {
            if !seen.insert(name.clone()) {
                return Err(EtlError::Catalog(format!("duplicate static variable {name:?}")));
            }
        }
        for kind in [ScoreKind::Rass, ScoreKind::Cam, ScoreKind::Gcs] {
            let name = score_variable_name(kind);
            match catalog.temporal.iter().find(|v| v.name == name) {
                Some(v) if v.kind == VariableKind::Score => {}
                _ => {
                    return Err(EtlError::Catalog(format!(
                        "catalog must declare score variable {name:?}"
                    )))
                }
            }
        }
        Ok(catalog)
    }

    pub fn index(&self) -> CatalogIndex {
        CatalogIndex {
            temporal: self
                .temporal
                .iter()
                .enumerate()
                .map(|(i, v)| (v.name.clone(), i))
                .collect(),
            statics: self
                .static_vars
                .iter()
                .enumerate()
                .map(|(i, v)| (v.name.clone(), i))
                .collect(),
        }
    }

    pub fn score_code(&self, kind: ScoreKind) -> usize {
        let name = score_variable_name(kind);
        self.temporal
            .iter()
            .position(|v| v.name == name)
            .expect("validated at construction")
    }

    /// Hex SHA-256 over names, kinds and units in declaration order.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for v in &self.temporal {
            hasher.update(format!("T|{}|{:?}|{}\n", v.name, v.kind, v.unit));
        }
        for s in &self.static_vars {
            hasher.update(format!("S|{}|{:?}\n", s.name, s.kind));
        }
        hex::encode(hasher.finalize())
    }
}

pub fn score_variable_name(kind: ScoreKind) -> &'static str {
    match kind {
        ScoreKind::Rass => "rass",
        ScoreKind::Cam => "cam",
        ScoreKind::Gcs => "gcs",
    }
}

#[derive(Debug, Clone)]
pub struct CatalogIndex {
    temporal: HashMap<String, usize>,
    statics: HashMap<String, usize>,
}

impl CatalogIndex {
    pub fn temporal(&self, raw_name: &str) -> Option<usize> {
        self.temporal
            .get(raw_name)
            .or_else(|| self.temporal.get(&canonical_name(raw_name)))
            .copied()
    }

    pub fn static_var(&self, raw_name: &str) -> Option<usize> {
        self.statics
            .get(raw_name)
            .or_else(|| self.statics.get(&canonical_name(raw_name)))
            .copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabularyEntry {
    pub name: String,
    pub code: usize,
    pub kind: VariableKind,
    pub retain: bool,
    /// Fraction of training stays in which the variable was observed.
    pub prevalence: f64,
}

/// Temporal variables with dense codes (the catalog order) and the retain
/// decision fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVocabulary {
    pub entries: Vec<VocabularyEntry>,
    pub prevalence_threshold: f64,
}

impl FeatureVocabulary {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_retained(&self, code: usize) -> bool {
        self.entries.get(code).is_some_and(|e| e.retain)
    }

    pub fn retained_codes(&self) -> Vec<usize> {
        self.entries.iter().filter(|e| e.retain).map(|e| e.code).collect()
    }

    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for e in &self.entries {
            hasher.update(format!("{}|{}|{:?}|{}\n", e.code, e.name, e.kind, e.retain));
        }
        hex::encode(hasher.finalize())
    }
}

/// Marks labs and medications observed in fewer than `prevalence_threshold`
/// of the training stays as not retained. `stays` yields, per training stay,
/// the set of catalog codes observed in it.
pub fn fit_vocabulary<I>(
    catalog: &Catalog,
    stays: I,
    prevalence_threshold: f64,
) -> Result<FeatureVocabulary, EtlError>
where
    I: IntoIterator,
    I::Item: IntoIterator<Item = usize>,
{
    if !(prevalence_threshold > 0.0 && prevalence_threshold < 1.0) {
        return Err(EtlError::Config(format!(
            "prevalence threshold {prevalence_threshold} outside (0, 1)"
        )));
    }
    let mut counts = vec![0usize; catalog.temporal.len()];
    let mut n_stays = 0usize;
    for stay in stays {
        n_stays += 1;
        let codes: BTreeSet<usize> = stay.into_iter().collect();
        for code in codes {
            if let Some(c) = counts.get_mut(code) {
                *c += 1;
            }
        }
    }
    if n_stays == 0 {
        return Err(EtlError::EmptyTrainingSet("vocabulary"));
    }
    let entries = catalog
        .temporal
        .iter()
        .enumerate()
        .map(|(code, spec)| {
            let prevalence = counts[code] as f64 / n_stays as f64;
            // Integer comparison avoids rounding at the exact threshold.
            let below = (counts[code] as f64) < prevalence_threshold * n_stays as f64 - 1e-9;
            VocabularyEntry {
                name: spec.name.clone(),
                code,
                kind: spec.kind,
                retain: !(spec.kind.is_filterable() && below),
                prevalence,
            }
        })
        .collect();
    Ok(FeatureVocabulary {
        entries,
        prevalence_threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_catalog() -> Catalog {
        let t = |name: &str, kind, unit: &str| VariableSpec {
            name: name.into(),
            kind,
            unit: unit.into(),
        };
        Catalog::new(
            vec![
                t("heart_rate", VariableKind::Vital, "bpm"),
                t("rass", VariableKind::Score, "score"),
                t("cam", VariableKind::Score, "score"),
                t("gcs", VariableKind::Score, "score"),
                t("propofol", VariableKind::Medication, "mcg/kg/min"),
                t("lactate", VariableKind::Lab, "mmol/L"),
            ],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn canonical_names() {
        assert_eq!(canonical_name("  Heart Rate "), "heart_rate");
        assert_eq!(canonical_name("heart-rate"), "heart_rate");
        assert_eq!(canonical_name("HEART__RATE"), "heart_rate");
        assert_eq!(canonical_unit(" mmol / L"), "mmol/l");
    }

    #[test]
    fn catalog_requires_scores() {
        let err = Catalog::new(
            vec![VariableSpec {
                name: "hr".into(),
                kind: VariableKind::Vital,
                unit: "bpm".into(),
            }],
            vec![],
        );
        assert!(err.is_err());
    }

    #[test]
    fn prevalence_filter() {
        let catalog = small_catalog();
        // 100 stays: heart rate everywhere, propofol in 3, lactate in exactly 5.
        let stays: Vec<Vec<usize>> = (0..100)
            .map(|i| {
                let mut codes = vec![0];
                if i < 3 {
                    codes.push(4);
                }
                if i < 5 {
                    codes.push(5);
                }
                codes
            })
            .collect();
        let vocab = fit_vocabulary(&catalog, stays, 0.05).unwrap();
        assert!(vocab.entries[0].retain);
        assert!(!vocab.entries[4].retain, "3% medication dropped");
        assert!(vocab.entries[5].retain, "exactly 5% retained");
        // Scores are never filtered, even when unobserved.
        assert!(vocab.entries[1].retain);
        assert_eq!(vocab.retained_codes(), vec![0, 1, 2, 3, 5]);
    }

    #[test]
    fn empty_training_and_bad_threshold() {
        let catalog = small_catalog();
        let none: Vec<Vec<usize>> = vec![];
        assert!(matches!(
            fit_vocabulary(&catalog, none, 0.05),
            Err(EtlError::EmptyTrainingSet(_))
        ));
        assert!(fit_vocabulary(&catalog, vec![vec![0usize]], 1.0).is_err());
    }
}
