//! Shift-level acute brain dysfunction labeling and prediction for ICU data.

pub mod encoding;
pub mod etl;
pub mod evaluation;
pub mod linalg;
pub mod model;
pub mod phenotype;
pub mod pipeline;
pub mod seeds;
pub mod synthgen;
