//! Raw EHR files to model-ready shifts.

pub mod bundle;
pub mod catalog;
pub mod extract;
pub mod preprocess;
pub mod raw;
pub mod split;
pub mod stats;

use thiserror::Error;

use crate::phenotype::PhenotypeError;

pub use bundle::{prepare, read_bundle, write_bundle, Bundle, BundleManifest, PrepareConfig};
pub use catalog::{fit_vocabulary, Catalog, FeatureVocabulary, StaticKind, StaticSpec, VariableKind, VariableSpec};
pub use extract::{clip_sequence, filter_shifts, RawShift, ShiftFunnel, StaticValue, StayRecord, WindowEvent};
pub use preprocess::{Cohort, ShiftRecord, TabularData, TabularPreprocessor, TokenPreprocessor};
pub use raw::{merge_encounters, RawEncounter};
pub use split::{split_dataset, Assignment, DatasetSplit, FoldView};

#[derive(Debug, Error)]
pub enum EtlError {
    #[error("catalog: {0}")]
    Catalog(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("empty training set: {0}")]
    EmptyTrainingSet(&'static str),
    #[error("missing input file {0}")]
    MissingInput(String),
    #[error("{0}: {1}")]
    Csv(String, String),
    #[error("{0}: {1}")]
    Io(String, String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation: {0}")]
    Validation(String),
    #[error("fitted statistics belong to a different catalog")]
    VocabularyMismatch,
    #[error(transparent)]
    Phenotype(#[from] PhenotypeError),
}
