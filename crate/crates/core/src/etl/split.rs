//! Patient-disjoint test hold-out and cross-validation folds.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::extract::RawShift;
use super::EtlError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Assignment {
    Fold(usize),
    Test,
}

impl Assignment {
    pub fn as_field(self) -> String {
        match self {
            Assignment::Fold(k) => k.to_string(),
            Assignment::Test => "test".into(),
        }
    }

    pub fn parse_field(raw: &str) -> Option<Assignment> {
        match raw.trim() {
            "test" => Some(Assignment::Test),
            s => s.parse().ok().map(Assignment::Fold),
        }
    }
}

/// Fold or test membership per patient, and per shift in shift order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub fold_count: usize,
    pub test_fraction: f64,
    pub patients: BTreeMap<String, Assignment>,
    pub shifts: Vec<Assignment>,
}

/// Row indices for one cross-validation round: train on every other fold,
/// validate on fold `k`, test on the hold-out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldView {
    pub fold: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplit {
    pub fn fold(&self, k: usize) -> FoldView {
        let mut view = FoldView {
            fold: k,
            train: Vec::new(),
            validation: Vec::new(),
            test: Vec::new(),
        };
        for (i, a) in self.shifts.iter().enumerate() {
            match *a {
                Assignment::Test => view.test.push(i),
                Assignment::Fold(f) if f == k => view.validation.push(i),
                Assignment::Fold(_) => view.train.push(i),
            }
        }
        view
    }

    /// Every non-test row.
    pub fn development(&self) -> Vec<usize> {
        (0..self.shifts.len())
            .filter(|&i| self.shifts[i] != Assignment::Test)
            .collect()
    }

    pub fn test(&self) -> Vec<usize> {
        (0..self.shifts.len())
            .filter(|&i| self.shifts[i] == Assignment::Test)
            .collect()
    }

    pub fn patients_in(&self, assignment: Assignment) -> BTreeSet<&str> {
        self.patients
            .iter()
            .filter(|(_, a)| **a == assignment)
            .map(|(p, _)| p.as_str())
            .collect()
    }
}

/// Shuffles patients with `seed`, holds out the first `test_fraction` of
/// them, and deals the rest round-robin into `fold_count` folds.
pub fn split_dataset(
    shifts: &[RawShift],
    seed: u64,
    fold_count: usize,
    test_fraction: f64,
) -> Result<DatasetSplit, EtlError> {
    if fold_count < 2 {
        return Err(EtlError::Config(format!("fold count {fold_count} is below 2")));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(EtlError::Config(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    let mut ids: Vec<&str> = shifts
        .iter()
        .map(|s| s.patient_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_test = (test_fraction * ids.len() as f64).round() as usize;
    if ids.len() - n_test < fold_count {
        return Err(EtlError::Validation(format!(
            "{} patients available for {fold_count} folds",
            ids.len() - n_test
        )));
    }
    let mut patients = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        let a = if i < n_test {
            Assignment::Test
        } else {
            Assignment::Fold((i - n_test) % fold_count)
        };
        patients.insert(id.to_string(), a);
    }
    let shift_assignments = shifts.iter().map(|s| patients[&s.patient_id]).collect();
    Ok(DatasetSplit {
        seed,
        fold_count,
        test_fraction,
        patients,
        shifts: shift_assignments,
    })
}
