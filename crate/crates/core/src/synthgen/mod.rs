//! Seeded synthetic ICU cohorts with tunable planted signal.
//!
//! Every shift of a stay gets a latent state (normal, delirium or coma)
//! drawn independently across shifts; the score streams recorded during the
//! shift express that state, and the phenotype rules turn them into labels.
//! Vitals, labs and medications in the 12 hours before a shift carry
//! precursors of its state (and of a death in it) with weight `signal`,
//! so with `signal = 0` no feature depends on the label.

mod simulate;
mod variables;

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDateTime;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::etl::raw::format_time;
use crate::etl::Catalog;
use crate::phenotype::{AcuityLabel, ShiftSpan};
use crate::seeds;

pub use simulate::SimulatedStay;
pub use variables::{default_catalog, Role};

pub const GENERATOR_VERSION: &str = concat!("acuity-synthgen ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic cohort configuration: {0}")]
    Config(String),
    #[error("infeasible prevalences: {0}")]
    Infeasible(String),
    #[error("{0}: {1}")]
    Io(String, String),
    #[error(transparent)]
    Phenotype(#[from] crate::phenotype::PhenotypeError),
}

/// Target shares of labeled shifts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prevalences {
    pub delirium: f64,
    pub coma: f64,
    pub mortality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub patients: usize,
    pub seed: u64,
    pub prevalence: Prevalences,
    /// Weight of the planted precursors, in [0, 1].
    pub signal: f64,
    /// Measurements per hour of each frequently charted vital.
    pub vital_rate_per_hour: f64,
    pub vitals: usize,
    pub labs: usize,
    pub medications: usize,
    pub los_median_days: f64,
    /// Log-scale spread of the stay-length distribution.
    pub los_sigma: f64,
    /// Stays shorter than 12 hours.
    pub short_stay_fraction: f64,
    /// Patients with a second, separate ICU stay.
    pub readmission_fraction: f64,
    /// Stays recorded as two encounters less than a day apart.
    pub split_encounter_fraction: f64,
    /// Stays with two consecutive shifts without any score.
    pub unscored_gap_fraction: f64,
    /// Patients missing a recorded BMI.
    pub missing_static_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            patients: 2000,
            seed: 0,
            prevalence: Prevalences {
                delirium: 0.06,
                coma: 0.09,
                mortality: 0.03,
            },
            signal: 1.0,
            vital_rate_per_hour: 0.5,
            vitals: 6,
            labs: 5,
            medications: 5,
            los_median_days: 8.0,
            los_sigma: 0.6,
            short_stay_fraction: 0.02,
            readmission_fraction: 0.1,
            split_encounter_fraction: 0.05,
            unscored_gap_fraction: 0.01,
            missing_static_fraction: 0.03,
        }
    }
}

impl SynthConfig {
    /// `brain_acuity` (6% delirium, 9% coma, 3% mortality) or `delirium`
    /// (8% delirium).
    pub fn preset(name: &str) -> Result<Self, SynthError> {
        let mut c = SynthConfig::default();
        match name {
            "brain_acuity" => {}
            "delirium" => c.prevalence.delirium = 0.08,
            other => return Err(SynthError::Config(format!("unknown preset {other:?}"))),
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        let p = self.prevalence;
        for (name, v) in [("delirium", p.delirium), ("coma", p.coma), ("mortality", p.mortality)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} prevalence must be non-negative"));
            }
        }
        if p.delirium + p.coma + p.mortality >= 1.0 {
            return bad("prevalences must sum to less than 1".into());
        }
        if !(0.0..=1.0).contains(&self.signal) {
            return bad(format!("signal {} outside [0, 1]", self.signal));
        }
        if !(self.vital_rate_per_hour > 0.0 && self.vital_rate_per_hour <= 12.0) {
            return bad("vital_rate_per_hour must lie in (0, 12]".into());
        }
        if self.vitals < variables::MIN_VITALS || self.labs < variables::MIN_LABS || self.medications < variables::MIN_MEDICATIONS {
            return bad(format!(
                "need at least {} vitals, {} labs and {} medications",
                variables::MIN_VITALS,
                variables::MIN_LABS,
                variables::MIN_MEDICATIONS
            ));
        }
        if !(self.los_median_days > 0.5 && self.los_median_days <= 60.0) || !(self.los_sigma >= 0.0 && self.los_sigma <= 2.0) {
            return bad("stay length median must lie in (0.5, 60] days and sigma in [0, 2]".into());
        }
        for (name, v) in [
            ("short_stay_fraction", self.short_stay_fraction),
            ("readmission_fraction", self.readmission_fraction),
            ("split_encounter_fraction", self.split_encounter_fraction),
            ("unscored_gap_fraction", self.unscored_gap_fraction),
            ("missing_static_fraction", self.missing_static_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncounterRow {
    pub patient_id: String,
    pub encounter_id: String,
    pub admit: NaiveDateTime,
    pub discharge: NaiveDateTime,
    pub death: Option<NaiveDateTime>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRow {
    /// Index into the cohort's encounters.
    pub encounter: usize,
    pub time: NaiveDateTime,
    pub code: usize,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub patient_id: String,
    pub stay_id: String,
    pub shift_index: usize,
    pub shift_start: NaiveDateTime,
    pub label: AcuityLabel,
    /// Passes the observation-length filters applied before modeling.
    pub retained: bool,
}

#[derive(Debug, Clone, Default)]
pub struct SynthCohort {
    pub catalog: Option<Catalog>,
    pub encounters: Vec<EncounterRow>,
    /// `(encounter index, name, value)`; empty value for a missing entry.
    pub statics: Vec<(usize, String, String)>,
    pub events: Vec<EventRow>,
    pub labels: Vec<LabelRow>,
    /// Latent state of every shift, as `(stay_id, shift_index, state)`.
    pub states: Vec<(String, usize, AcuityLabel)>,
    /// Stays as simulated, in minutes from admission.
    pub stays: Vec<SimulatedStay>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub patients: usize,
    pub encounters: usize,
    pub stays: usize,
    pub events: usize,
    /// Labels of all shifts, including ones dropped by the filters.
    pub label_counts: BTreeMap<AcuityLabel, usize>,
    pub retained_label_counts: BTreeMap<AcuityLabel, usize>,
    /// Share of retained, labeled (non-excluded) shifts per class.
    pub retained_prevalence: BTreeMap<AcuityLabel, f64>,
    pub median_los_days: f64,
    pub median_events_per_stay: f64,
    /// Fraction of stays with at least one event of each variable.
    pub feature_prevalence: BTreeMap<String, f64>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Counts, stay lengths and feature coverage of a cohort.
pub fn describe(cohort: &SynthCohort) -> CohortSummary {
    let mut label_counts: BTreeMap<AcuityLabel, usize> = BTreeMap::new();
    let mut retained_label_counts: BTreeMap<AcuityLabel, usize> = BTreeMap::new();
    for l in &cohort.labels {
        *label_counts.entry(l.label).or_default() += 1;
        if l.retained {
            *retained_label_counts.entry(l.label).or_default() += 1;
        }
    }
    let labeled: usize = retained_label_counts
        .iter()
        .filter(|(l, _)| **l != AcuityLabel::Excluded)
        .map(|(_, c)| c)
        .sum();
    let retained_prevalence = retained_label_counts
        .iter()
        .filter(|(l, _)| **l != AcuityLabel::Excluded)
        .map(|(l, &c)| (*l, c as f64 / labeled as f64))
        .collect();

    let mut stay_of_encounter = vec![0usize; cohort.encounters.len()];
    let mut stay_ids: Vec<&str> = Vec::new();
    for (i, s) in cohort.stays.iter().enumerate() {
        for &e in &s.encounters {
            stay_of_encounter[e] = i;
        }
        stay_ids.push(&s.stay_id);
    }
    let mut events_per_stay = vec![0usize; cohort.stays.len()];
    let names: Vec<String> = cohort.catalog.as_ref().map(|c| c.temporal.iter().map(|v| v.name.clone()).collect()).unwrap_or_default();
    let mut seen = vec![vec![false; names.len()]; cohort.stays.len()];
    for e in &cohort.events {
        if cohort.stays.is_empty() {
            break;
        }
        let s = stay_of_encounter[e.encounter];
        events_per_stay[s] += 1;
        if e.code < names.len() {
            seen[s][e.code] = true;
        }
    }
    let stays = cohort.stays.len();
    let feature_prevalence = names
        .iter()
        .enumerate()
        .map(|(c, n)| {
            let k = seen.iter().filter(|row| row[c]).count();
            (n.clone(), if stays == 0 { 0.0 } else { k as f64 / stays as f64 })
        })
        .collect();
    let patients = cohort
        .encounters
        .iter()
        .map(|e| e.patient_id.as_str())
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    CohortSummary {
        patients,
        encounters: cohort.encounters.len(),
        stays,
        events: cohort.events.len(),
        label_counts,
        retained_label_counts,
        retained_prevalence,
        median_los_days: median(cohort.stays.iter().map(|s| s.discharge as f64 / 1440.0).collect()),
        median_events_per_stay: median(events_per_stay.iter().map(|&n| n as f64).collect()),
        feature_prevalence,
    }
}

/// Generates a cohort; deterministic given the configuration.
pub fn generate(config: &SynthConfig) -> Result<SynthCohort, SynthError> {
    config.validate()?;
    let catalog = default_catalog(config);
    let layout = variables::Layout::new(config);

    let skeletons: Vec<Vec<simulate::StaySkeleton>> = (0..config.patients)
        .into_par_iter()
        .map(|i| simulate::skeleton(config, i))
        .collect();

    // Death probability per stay that makes dead shifts the target share of
    // retained shifts.
    let mut retained = 0usize;
    let mut eligible = 0usize;
    for s in skeletons.iter().flatten() {
        retained += s.retained_shifts;
        eligible += usize::from(s.death_eligible);
    }
    let p = config.prevalence;
    let death_probability = if p.mortality == 0.0 {
        0.0
    } else if eligible == 0 {
        return Err(SynthError::Infeasible("no stay is long enough to end in a retained shift".into()));
    } else {
        // A death shift is a shift the stay would have had anyway.
        p.mortality * retained as f64 / eligible as f64
    };
    if death_probability > 0.95 {
        return Err(SynthError::Infeasible(format!(
            "{:.0}% of eligible stays would have to end in death",
            death_probability * 100.0
        )));
    }
    let living = 1.0 - p.mortality;
    let state_probs = [p.delirium / living, p.coma / living];
    if state_probs[0] + state_probs[1] >= 1.0 {
        return Err(SynthError::Infeasible("delirium and coma leave no normal shifts".into()));
    }

    let patients: Vec<simulate::PatientOutput> = skeletons
        .into_par_iter()
        .enumerate()
        .map(|(i, stays)| {
            let mut rng = seeds::stream(config.seed, &[i as u64, seeds::tag("simulate")]);
            simulate::simulate_patient(config, &layout, i, stays, death_probability, state_probs, &mut rng)
        })
        .collect::<Result<_, _>>()?;

    let mut cohort = SynthCohort {
        catalog: Some(catalog),
        ..Default::default()
    };
    for out in patients {
        let base = cohort.encounters.len();
        cohort.encounters.extend(out.encounters);
        cohort.statics.extend(out.statics.into_iter().map(|(e, n, v)| (e + base, n, v)));
        cohort.events.extend(out.events.into_iter().map(|mut e| {
            e.encounter += base;
            e
        }));
        cohort.labels.extend(out.labels);
        cohort.states.extend(out.states);
        cohort.stays.extend(out.stays.into_iter().map(|mut s| {
            s.encounters.iter_mut().for_each(|e| *e += base);
            s
        }));
    }
    Ok(cohort)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub generator: String,
    pub config: SynthConfig,
    pub catalog: Catalog,
    pub summary: CohortSummary,
    pub files: BTreeMap<String, String>,
}

fn csv_bytes<F>(header: &[&str], fill: F) -> Result<Vec<u8>, SynthError>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| SynthError::Io("csv".into(), e.to_string()))?;
    fill(&mut w).map_err(|e| SynthError::Io("csv".into(), e.to_string()))?;
    w.into_inner().map_err(|e| SynthError::Io("csv".into(), e.to_string()))
}

/// Writes `encounters.csv`, `static.csv`, `events.csv`, `labels.csv` and,
/// last, `manifest.json` into `out_dir`.
pub fn write_cohort(cohort: &SynthCohort, config: &SynthConfig, out_dir: &Path) -> Result<SynthManifest, SynthError> {
    let catalog = cohort.catalog.clone().unwrap_or_else(|| default_catalog(config));
    let io = |p: &Path, e: std::io::Error| SynthError::Io(p.display().to_string(), e.to_string());
    std::fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;

    let encounters = csv_bytes(&["patient_id", "encounter_id", "admit_iso8601", "discharge_iso8601", "death_iso8601"], |w| {
        for e in &cohort.encounters {
            let death = e.death.map(format_time).unwrap_or_default();
            w.write_record([e.patient_id.as_str(), &e.encounter_id, &format_time(e.admit), &format_time(e.discharge), &death])?;
        }
        Ok(())
    })?;
    let statics = csv_bytes(&["patient_id", "encounter_id", "name", "value"], |w| {
        for (e, name, value) in &cohort.statics {
            let enc = &cohort.encounters[*e];
            w.write_record([enc.patient_id.as_str(), &enc.encounter_id, name, value])?;
        }
        Ok(())
    })?;
    let events = csv_bytes(&["patient_id", "encounter_id", "time_iso8601", "name", "value", "unit"], |w| {
        for ev in &cohort.events {
            let enc = &cohort.encounters[ev.encounter];
            let var = &catalog.temporal[ev.code];
            w.write_record([enc.patient_id.as_str(), &enc.encounter_id, &format_time(ev.time), &var.name, &ev.value, &var.unit])?;
        }
        Ok(())
    })?;
    let labels = csv_bytes(&["patient_id", "stay_id", "shift_index", "shift_start", "label"], |w| {
        for l in &cohort.labels {
            w.write_record([l.patient_id.as_str(), &l.stay_id, &l.shift_index.to_string(), &format_time(l.shift_start), l.label.as_str()])?;
        }
        Ok(())
    })?;

    let mut files = BTreeMap::new();
    for (name, bytes) in [
        ("encounters.csv", &encounters),
        ("static.csv", &statics),
        ("events.csv", &events),
        ("labels.csv", &labels),
    ] {
        let path = out_dir.join(name);
        let partial = path.with_extension("csv.partial");
        std::fs::write(&partial, bytes).map_err(|e| io(&partial, e))?;
        std::fs::rename(&partial, &path).map_err(|e| io(&path, e))?;
        files.insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
    }
    let manifest = SynthManifest {
        generator: GENERATOR_VERSION.to_string(),
        config: config.clone(),
        catalog,
        summary: describe(cohort),
        files,
    };
    let mut json = serde_json::to_vec_pretty(&manifest).map_err(|e| SynthError::Io("manifest.json".into(), e.to_string()))?;
    json.push(b'\n');
    let path = out_dir.join("manifest.json");
    let partial = out_dir.join("manifest.json.partial");
    std::fs::write(&partial, &json).map_err(|e| io(&partial, e))?;
    std::fs::rename(&partial, &path).map_err(|e| io(&path, e))?;
    Ok(manifest)
}

/// Spans of a stay's shift grid in minutes from admission.
pub(crate) fn grid_spans(admit: NaiveDateTime, discharge: NaiveDateTime) -> (Vec<ShiftSpan>, usize) {
    let g = crate::phenotype::shift_grid(admit, discharge);
    (g.shifts, g.started_before_admission)
}
