//! Train-fitted normalization for the two model input paths.
//!
//! Token path: winsorize, then standardize each temporal variable; statics are
//! median/mode imputed, numeric ones standardized and categorical ones one-hot
//! encoded. Tabular path: winsorize, average per window, impute across each
//! stay's shifts, then min-max scale everything to `[0, 1]`.
//!
//! Every statistic is fitted from training rows only; `transform` never looks
//! at the rows it is transforming to derive parameters.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::catalog::{fit_vocabulary, Catalog, FeatureVocabulary, StaticKind, VariableKind};
use super::extract::{RawShift, StaticValue, StayRecord};
use super::stats::{self, ClipBounds, MinMax, Standardizer};
use super::EtlError;
use crate::encoding::{ObservationTriplet, WINDOW_MINUTES};
use crate::phenotype::AcuityLabel;

/// Shifts plus the stays they belong to.
#[derive(Debug, Clone)]
pub struct Cohort<'a> {
    pub catalog: &'a Catalog,
    pub stays: &'a [StayRecord],
    pub shifts: &'a [RawShift],
    stay_lookup: HashMap<&'a str, usize>,
}

impl<'a> Cohort<'a> {
    pub fn new(catalog: &'a Catalog, stays: &'a [StayRecord], shifts: &'a [RawShift]) -> Self {
        let stay_lookup = stays
            .iter()
            .enumerate()
            .map(|(i, s)| (s.stay_id.as_str(), i))
            .collect();
        Cohort {
            catalog,
            stays,
            shifts,
            stay_lookup,
        }
    }

    pub fn stay_of(&self, shift: &RawShift) -> Option<&'a StayRecord> {
        self.stay_lookup.get(shift.stay_id.as_str()).map(|&i| &self.stays[i])
    }

    fn statics_of(&self, shift: &RawShift) -> &'a BTreeMap<usize, StaticValue> {
        static EMPTY: BTreeMap<usize, StaticValue> = BTreeMap::new();
        self.stay_of(shift).map(|s| &s.statics).unwrap_or(&EMPTY)
    }

    /// Per training stay, the set of codes observed in its shift windows.
    fn presence(&self, rows: &[usize]) -> Vec<BTreeSet<usize>> {
        let mut by_stay: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
        for &i in rows {
            let s = &self.shifts[i];
            by_stay
                .entry(s.stay_id.as_str())
                .or_default()
                .extend(s.window.iter().map(|e| e.code));
        }
        by_stay.into_values().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NumericScaling {
    Standard,
    MinMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericStatic {
    pub index: usize,
    pub name: String,
    pub median: f64,
    pub standard: Standardizer,
    pub range: MinMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalStatic {
    pub index: usize,
    pub name: String,
    pub mode: Option<String>,
    /// One-hot levels seen in training, sorted. Unseen levels encode as all zeros.
    pub levels: Vec<String>,
}

/// Imputes and encodes static characteristics into a fixed-length vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticEncoder {
    pub scaling: NumericScaling,
    pub numeric: Vec<NumericStatic>,
    pub categorical: Vec<CategoricalStatic>,
}

impl StaticEncoder {
    pub fn fit<'b, I>(catalog: &Catalog, rows: I, scaling: NumericScaling) -> StaticEncoder
    where
        I: IntoIterator<Item = &'b BTreeMap<usize, StaticValue>>,
    {
        let rows: Vec<&BTreeMap<usize, StaticValue>> = rows.into_iter().collect();
        let mut numeric = Vec::new();
        let mut categorical = Vec::new();
        for (index, spec) in catalog.static_vars.iter().enumerate() {
            match spec.kind {
                StaticKind::Numeric => {
                    let observed: Vec<f64> = rows
                        .iter()
                        .filter_map(|r| match r.get(&index) {
                            Some(StaticValue::Numeric(v)) => Some(*v),
                            _ => None,
                        })
                        .collect();
                    // An all-missing variable imputes to 0.
                    let median = stats::median(&observed).unwrap_or(0.0);
                    let imputed: Vec<f64> = rows
                        .iter()
                        .map(|r| match r.get(&index) {
                            Some(StaticValue::Numeric(v)) => *v,
                            _ => median,
                        })
                        .collect();
                    numeric.push(NumericStatic {
                        index,
                        name: spec.name.clone(),
                        median,
                        standard: Standardizer::fit(&imputed),
                        range: MinMax::fit(&imputed),
                    });
                }
                StaticKind::Categorical => {
                    let observed: Vec<&str> = rows
                        .iter()
                        .filter_map(|r| match r.get(&index) {
                            Some(StaticValue::Categorical(v)) => Some(v.as_str()),
                            _ => None,
                        })
                        .collect();
                    let levels: BTreeSet<&str> = observed.iter().copied().collect();
                    categorical.push(CategoricalStatic {
                        index,
                        name: spec.name.clone(),
                        mode: stats::mode(observed.iter().copied()),
                        levels: levels.into_iter().map(str::to_string).collect(),
                    });
                }
            }
        }
        StaticEncoder {
            scaling,
            numeric,
            categorical,
        }
    }

    pub fn dim(&self) -> usize {
        self.numeric.len() + self.categorical.iter().map(|c| c.levels.len()).sum::<usize>()
    }

    pub fn encode(&self, statics: &BTreeMap<usize, StaticValue>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for n in &self.numeric {
            let raw = match statics.get(&n.index) {
                Some(StaticValue::Numeric(v)) => *v,
                _ => n.median,
            };
            out.push(match self.scaling {
                NumericScaling::Standard => n.standard.apply(raw),
                NumericScaling::MinMax => n.range.apply(raw),
            });
        }
        for c in &self.categorical {
            let value = match statics.get(&c.index) {
                Some(StaticValue::Categorical(v)) => Some(v.as_str()),
                _ => c.mode.as_deref(),
            };
            out.extend(c.levels.iter().map(|l| if Some(l.as_str()) == value { 1.0 } else { 0.0 }));
        }
        out
    }

    pub fn feature_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.numeric.iter().map(|n| n.name.clone()).collect();
        for c in &self.categorical {
            names.extend(c.levels.iter().map(|l| format!("{}={}", c.name, l)));
        }
        names
    }
}

/// Model-ready shift for the token path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRecord {
    pub patient_id: String,
    pub stay_id: String,
    pub shift_index: usize,
    pub window: Vec<ObservationTriplet>,
    pub static_vector: Vec<f64>,
    pub label: AcuityLabel,
    pub binary_delirium_label: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariableStats {
    pub clip: ClipBounds,
    pub standard: Standardizer,
}

fn variable_values(cohort: &Cohort<'_>, rows: &[usize], n_codes: usize) -> Vec<Vec<f64>> {
    let mut values = vec![Vec::new(); n_codes];
    for &i in rows {
        for e in &cohort.shifts[i].window {
            values[e.code].push(e.value);
        }
    }
    values
}

/// Fitted token-path normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenPreprocessor {
    pub catalog_hash: String,
    pub vocabulary: FeatureVocabulary,
    /// Indexed by code; only meaningful for retained codes.
    pub variables: Vec<VariableStats>,
    pub statics: StaticEncoder,
}

impl TokenPreprocessor {
    pub fn fit(cohort: &Cohort<'_>, train: &[usize], prevalence_threshold: f64) -> Result<Self, EtlError> {
        if train.is_empty() {
            return Err(EtlError::EmptyTrainingSet("token preprocessor"));
        }
        let vocabulary = fit_vocabulary(cohort.catalog, cohort.presence(train), prevalence_threshold)?;
        let raw = variable_values(cohort, train, vocabulary.len());
        let variables = raw
            .iter()
            .map(|vals| {
                let clip = ClipBounds::fit(vals);
                let clipped = stats::clip_outliers(vals, clip);
                VariableStats {
                    clip,
                    standard: Standardizer::fit(&clipped),
                }
            })
            .collect();
        let statics = StaticEncoder::fit(
            cohort.catalog,
            train.iter().map(|&i| cohort.statics_of(&cohort.shifts[i])),
            NumericScaling::Standard,
        );
        Ok(TokenPreprocessor {
            catalog_hash: cohort.catalog.hash(),
            vocabulary,
            variables,
            statics,
        })
    }

    pub fn static_dim(&self) -> usize {
        self.statics.dim()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn transform_one(&self, cohort: &Cohort<'_>, shift: &RawShift) -> ShiftRecord {
        let window = shift
            .window
            .iter()
            .filter(|e| self.vocabulary.is_retained(e.code))
            .map(|e| {
                let s = &self.variables[e.code];
                ObservationTriplet {
                    t: (e.offset + WINDOW_MINUTES) as f64 / WINDOW_MINUTES as f64,
                    f: e.code,
                    v: s.standard.apply(s.clip.apply(e.value)),
                }
            })
            .collect();
        ShiftRecord {
            patient_id: shift.patient_id.clone(),
            stay_id: shift.stay_id.clone(),
            shift_index: shift.shift_index,
            window,
            static_vector: self.statics.encode(cohort.statics_of(shift)),
            label: shift.label,
            binary_delirium_label: shift.delirium,
        }
    }

    pub fn transform(&self, cohort: &Cohort<'_>, rows: &[usize]) -> Result<Vec<ShiftRecord>, EtlError> {
        if cohort.catalog.hash() != self.catalog_hash {
            return Err(EtlError::VocabularyMismatch);
        }
        Ok(rows
            .par_iter()
            .map(|&i| self.transform_one(cohort, &cohort.shifts[i]))
            .collect())
    }
}

/// Aggregated, imputed and scaled feature matrix for the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularData {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<AcuityLabel>,
    pub delirium: Vec<Option<bool>>,
    pub patient_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPreprocessor {
    pub catalog_hash: String,
    pub vocabulary: FeatureVocabulary,
    pub clip: Vec<ClipBounds>,
    /// Retained codes, in column order.
    pub temporal_columns: Vec<usize>,
    /// Fill value per temporal column when a stay never observes it:
    /// training mean, or 0 for medications.
    pub fallbacks: Vec<f64>,
    pub ranges: Vec<MinMax>,
    pub statics: StaticEncoder,
}

impl TabularPreprocessor {
    fn aggregate(
        &self,
        cohort: &Cohort<'_>,
        rows: &[usize],
    ) -> (Vec<Vec<Option<f64>>>, Vec<usize>, Vec<f64>) {
        let matrix: Vec<Vec<Option<f64>>> = rows
            .par_iter()
            .map(|&i| {
                let clipped: Vec<_> = cohort.shifts[i]
                    .window
                    .iter()
                    .map(|e| {
                        let mut e = *e;
                        e.value = self.clip[e.code].apply(e.value);
                        e
                    })
                    .collect();
                stats::aggregate_window(&clipped, &self.temporal_columns)
            })
            .collect();
        let mut groups = Vec::with_capacity(rows.len());
        let mut group = 0usize;
        for (k, &i) in rows.iter().enumerate() {
            if k > 0 && cohort.shifts[rows[k - 1]].stay_id != cohort.shifts[i].stay_id {
                group += 1;
            }
            groups.push(group);
        }
        let positions = rows.iter().map(|&i| cohort.shifts[i].shift_index as f64).collect();
        (matrix, groups, positions)
    }

    fn unscaled(&self, cohort: &Cohort<'_>, rows: &[usize]) -> Vec<Vec<f64>> {
        let (matrix, groups, positions) = self.aggregate(cohort, rows);
        let temporal = stats::impute_tabular(&matrix, &groups, &positions, &self.fallbacks);
        temporal
            .into_iter()
            .zip(rows)
            .map(|(mut row, &i)| {
                row.extend(self.statics.encode(cohort.statics_of(&cohort.shifts[i])));
                row
            })
            .collect()
    }

    /// `train` must list rows in (patient, stay, shift) order.
    pub fn fit(cohort: &Cohort<'_>, train: &[usize], prevalence_threshold: f64) -> Result<Self, EtlError> {
        if train.is_empty() {
            return Err(EtlError::EmptyTrainingSet("tabular preprocessor"));
        }
        let vocabulary = fit_vocabulary(cohort.catalog, cohort.presence(train), prevalence_threshold)?;
        let raw = variable_values(cohort, train, vocabulary.len());
        let clip: Vec<ClipBounds> = raw.iter().map(|v| ClipBounds::fit(v)).collect();
        let temporal_columns = vocabulary.retained_codes();
        let statics = StaticEncoder::fit(
            cohort.catalog,
            train.iter().map(|&i| cohort.statics_of(&cohort.shifts[i])),
            NumericScaling::MinMax,
        );
        let mut pre = TabularPreprocessor {
            catalog_hash: cohort.catalog.hash(),
            vocabulary,
            clip,
            fallbacks: vec![0.0; temporal_columns.len()],
            temporal_columns,
            ranges: Vec::new(),
            statics,
        };
        let (matrix, _, _) = pre.aggregate(cohort, train);
        pre.fallbacks = pre
            .temporal_columns
            .iter()
            .enumerate()
            .map(|(j, &code)| {
                if cohort.catalog.temporal[code].kind == VariableKind::Medication {
                    return 0.0;
                }
                let observed: Vec<f64> = matrix.iter().filter_map(|r| r[j]).collect();
                if observed.is_empty() {
                    0.0
                } else {
                    observed.iter().sum::<f64>() / observed.len() as f64
                }
            })
            .collect();
        let unscaled = pre.unscaled(cohort, train);
        let n_cols = unscaled.first().map_or(0, Vec::len);
        pre.ranges = (0..n_cols)
            .map(|j| MinMax::fit(&unscaled.iter().map(|r| r[j]).collect::<Vec<_>>()))
            .collect();
        Ok(pre)
    }

    pub fn columns(&self, catalog: &Catalog) -> Vec<String> {
        let mut names: Vec<String> = self
            .temporal_columns
            .iter()
            .map(|&c| catalog.temporal[c].name.clone())
            .collect();
        names.extend(self.statics.feature_names());
        names
    }

    pub fn transform(&self, cohort: &Cohort<'_>, rows: &[usize]) -> Result<TabularData, EtlError> {
        if cohort.catalog.hash() != self.catalog_hash {
            return Err(EtlError::VocabularyMismatch);
        }
        let mut matrix = self.unscaled(cohort, rows);
        stats::scale_minmax(&mut matrix, &self.ranges);
        Ok(TabularData {
            columns: self.columns(cohort.catalog),
            rows: matrix,
            labels: rows.iter().map(|&i| cohort.shifts[i].label).collect(),
            delirium: rows.iter().map(|&i| cohort.shifts[i].delirium).collect(),
            patient_ids: rows.iter().map(|&i| cohort.shifts[i].patient_id.clone()).collect(),
        })
    }
}
