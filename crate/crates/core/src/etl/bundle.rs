//! Running the extraction pipeline and the on-disk dataset bundle.
//!
//! A bundle directory holds `stays.csv`, `shifts.csv`, `windows.csv`, an
//! optional `tabular.csv`, and `manifest.json` recording the catalog, the
//! split, the filter funnel, reference statistics fitted on the
//! development rows, and a SHA-256 digest of every data file.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::catalog::{Catalog, StaticKind};
use super::extract::{extract_shifts, RawShift, ShiftFunnel, StaticValue, StayRecord, WindowEvent};
use super::preprocess::{Cohort, TabularPreprocessor, TokenPreprocessor};
use super::raw::{merge_all, read_raw_dir, ReadCounts};
use super::split::{split_dataset, Assignment, DatasetSplit};
use super::EtlError;
use crate::phenotype::{AcuityLabel, SHIFT_MINUTES};

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareConfig {
    pub prevalence_threshold: f64,
    pub max_sequence_length: usize,
    pub fold_count: usize,
    pub test_fraction: f64,
    /// How far before admission events are accepted.
    pub history_minutes: i64,
    pub tabular: bool,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            prevalence_threshold: 0.05,
            max_sequence_length: super::extract::DEFAULT_MAX_SEQUENCE_LENGTH,
            fold_count: 5,
            test_fraction: 0.2,
            history_minutes: SHIFT_MINUTES,
            tabular: false,
        }
    }
}

impl PrepareConfig {
    pub fn validate(&self) -> Result<(), EtlError> {
        if !(self.prevalence_threshold > 0.0 && self.prevalence_threshold < 1.0) {
            return Err(EtlError::Config("prevalence_threshold must lie in (0, 1)".into()));
        }
        if self.max_sequence_length == 0 {
            return Err(EtlError::Config("max_sequence_length must be at least 1".into()));
        }
        if self.fold_count < 2 {
            return Err(EtlError::Config("fold_count must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(EtlError::Config("test_fraction must lie in [0, 1)".into()));
        }
        if self.history_minutes < 0 {
            return Err(EtlError::Config("history_minutes must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceStats {
    pub token: TokenPreprocessor,
    pub tabular: Option<TabularPreprocessor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub seed: u64,
    pub config: PrepareConfig,
    pub catalog: Catalog,
    pub catalog_hash: String,
    pub read_counts: ReadCounts,
    pub funnel: ShiftFunnel,
    pub label_counts: BTreeMap<AcuityLabel, usize>,
    pub fold_count: usize,
    pub patients_per_assignment: BTreeMap<String, usize>,
    pub shifts_per_assignment: BTreeMap<String, usize>,
    /// Fitted on all non-test rows; per-fold models refit on their own
    /// training rows.
    pub reference: ReferenceStats,
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub catalog: Catalog,
    pub stays: Vec<StayRecord>,
    pub shifts: Vec<RawShift>,
    pub split: DatasetSplit,
    pub manifest: BundleManifest,
}

impl Bundle {
    pub fn cohort(&self) -> Cohort<'_> {
        Cohort::new(&self.catalog, &self.stays, &self.shifts)
    }
}

/// Reads, merges, labels, filters, windows and splits a raw cohort.
pub fn prepare(raw_dir: &Path, catalog: Catalog, config: &PrepareConfig, seed: u64) -> Result<Bundle, EtlError> {
    config.validate()?;
    let (encounters, read_counts) = read_raw_dir(raw_dir, &catalog, config.history_minutes)?;
    let stays = merge_all(encounters)?;
    let (stays, shifts, funnel) = extract_shifts(&stays, &catalog, config.max_sequence_length)?;
    if !funnel.is_balanced() {
        return Err(EtlError::Validation("shift funnel does not balance".into()));
    }
    if shifts.is_empty() {
        return Err(EtlError::EmptyTrainingSet("no shift survived filtering"));
    }
    let split = split_dataset(&shifts, seed, config.fold_count, config.test_fraction)?;
    let reference = {
        let cohort = Cohort::new(&catalog, &stays, &shifts);
        let dev = split.development();
        ReferenceStats {
            token: TokenPreprocessor::fit(&cohort, &dev, config.prevalence_threshold)?,
            tabular: if config.tabular {
                Some(TabularPreprocessor::fit(&cohort, &dev, config.prevalence_threshold)?)
            } else {
                None
            },
        }
    };
    let mut label_counts = BTreeMap::new();
    for s in &shifts {
        *label_counts.entry(s.label).or_insert(0) += 1;
    }
    let mut patients_per_assignment = BTreeMap::new();
    for a in split.patients.values() {
        *patients_per_assignment.entry(a.as_field()).or_insert(0) += 1;
    }
    let mut shifts_per_assignment = BTreeMap::new();
    for a in &split.shifts {
        *shifts_per_assignment.entry(a.as_field()).or_insert(0) += 1;
    }
    let manifest = BundleManifest {
        format_version: BUNDLE_FORMAT_VERSION,
        seed,
        config: config.clone(),
        catalog_hash: catalog.hash(),
        catalog: catalog.clone(),
        read_counts,
        funnel,
        label_counts,
        fold_count: config.fold_count,
        patients_per_assignment,
        shifts_per_assignment,
        reference,
        files: BTreeMap::new(),
    };
    Ok(Bundle {
        catalog,
        stays,
        shifts,
        split,
        manifest,
    })
}

pub fn sha256_file(path: &Path) -> Result<String, EtlError> {
    let bytes = fs::read(path).map_err(|e| EtlError::Io(path.display().to_string(), e.to_string()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), EtlError> {
    let tmp = path.with_extension("partial");
    let io = |e: std::io::Error| EtlError::Io(path.display().to_string(), e.to_string());
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

fn csv_bytes<F>(header: &[String], fill: F) -> Result<Vec<u8>, EtlError>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<(), csv::Error>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| EtlError::Csv("bundle".into(), e.to_string());
    w.write_record(header).map_err(err)?;
    fill(&mut w).map_err(err)?;
    w.into_inner().map_err(|e| EtlError::Csv("bundle".into(), e.to_string()))
}

fn static_field(v: Option<&StaticValue>) -> String {
    match v {
        None => String::new(),
        Some(StaticValue::Numeric(x)) => x.to_string(),
        Some(StaticValue::Categorical(s)) => s.clone(),
    }
}

fn delirium_field(v: Option<bool>) -> &'static str {
    match v {
        Some(true) => "1",
        Some(false) => "0",
        None => "",
    }
}

fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// Writes the bundle into `out_dir` and returns the manifest as written.
pub fn write_bundle(bundle: &Bundle, out_dir: &Path) -> Result<BundleManifest, EtlError> {
    fs::create_dir_all(out_dir).map_err(|e| EtlError::Io(out_dir.display().to_string(), e.to_string()))?;
    let mut files: Vec<(&str, Vec<u8>)> = Vec::new();

    let mut stay_header = header(&["patient_id", "stay_id", "los_minutes"]);
    stay_header.extend(bundle.catalog.static_vars.iter().map(|s| s.name.clone()));
    files.push((
        "stays.csv",
        csv_bytes(&stay_header, |w| {
            for s in &bundle.stays {
                let mut row = vec![s.patient_id.clone(), s.stay_id.clone(), s.los_minutes.to_string()];
                row.extend((0..bundle.catalog.static_vars.len()).map(|i| static_field(s.statics.get(&i))));
                w.write_record(&row)?;
            }
            Ok(())
        })?,
    ));

    files.push((
        "shifts.csv",
        csv_bytes(
            &header(&[
                "row", "patient_id", "stay_id", "shift_index", "shift_start", "label", "delirium", "fold",
            ]),
            |w| {
                for (i, (s, a)) in bundle.shifts.iter().zip(&bundle.split.shifts).enumerate() {
                    w.write_record([
                        i.to_string(),
                        s.patient_id.clone(),
                        s.stay_id.clone(),
                        s.shift_index.to_string(),
                        s.shift_start.to_string(),
                        s.label.as_str().to_string(),
                        delirium_field(s.delirium).to_string(),
                        a.as_field(),
                    ])?;
                }
                Ok(())
            },
        )?,
    ));

    let names: Vec<&str> = bundle.catalog.temporal.iter().map(|v| v.name.as_str()).collect();
    files.push((
        "windows.csv",
        csv_bytes(&header(&["row", "offset", "name", "value"]), |w| {
            for (i, s) in bundle.shifts.iter().enumerate() {
                for e in &s.window {
                    w.write_record([
                        i.to_string(),
                        e.offset.to_string(),
                        names[e.code].to_string(),
                        e.value.to_string(),
                    ])?;
                }
            }
            Ok(())
        })?,
    ));

    if let Some(tab) = &bundle.manifest.reference.tabular {
        let cohort = bundle.cohort();
        let rows: Vec<usize> = (0..bundle.shifts.len()).collect();
        let data = tab.transform(&cohort, &rows)?;
        let mut h = header(&["row", "patient_id", "stay_id", "shift_index", "label", "delirium", "fold"]);
        h.extend(data.columns.iter().cloned());
        files.push((
            "tabular.csv",
            csv_bytes(&h, |w| {
                for (i, values) in data.rows.iter().enumerate() {
                    let s = &bundle.shifts[i];
                    let mut row = vec![
                        i.to_string(),
                        s.patient_id.clone(),
                        s.stay_id.clone(),
                        s.shift_index.to_string(),
                        s.label.as_str().to_string(),
                        delirium_field(s.delirium).to_string(),
                        bundle.split.shifts[i].as_field(),
                    ];
                    row.extend(values.iter().map(|v| v.to_string()));
                    w.write_record(&row)?;
                }
                Ok(())
            })?,
        ));
    }

    let mut manifest = bundle.manifest.clone();
    manifest.files.clear();
    for (name, bytes) in &files {
        write_atomic(&out_dir.join(name), bytes)?;
        manifest.files.insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
    }
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| EtlError::Parse(e.to_string()))?;
    write_atomic(&out_dir.join("manifest.json"), &json)?;
    Ok(manifest)
}

fn reader(dir: &Path, name: &str) -> Result<csv::Reader<fs::File>, EtlError> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(EtlError::MissingInput(path.display().to_string()));
    }
    csv::Reader::from_path(&path).map_err(|e| EtlError::Csv(name.into(), e.to_string()))
}

fn parse_num<T: std::str::FromStr>(raw: Option<&str>, file: &str) -> Result<T, EtlError> {
    raw.and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| EtlError::Parse(format!("{file}: bad numeric field {raw:?}")))
}

pub fn read_manifest(dir: &Path) -> Result<BundleManifest, EtlError> {
    let path: PathBuf = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|_| EtlError::MissingInput(path.display().to_string()))?;
    let manifest: BundleManifest =
        serde_json::from_slice(&bytes).map_err(|e| EtlError::Parse(format!("manifest.json: {e}")))?;
    if manifest.format_version != BUNDLE_FORMAT_VERSION {
        return Err(EtlError::Validation(format!(
            "bundle format version {} is not supported",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Loads a bundle, verifying every data file against its recorded digest.
pub fn read_bundle(dir: &Path) -> Result<Bundle, EtlError> {
    let manifest = read_manifest(dir)?;
    for (name, digest) in &manifest.files {
        let actual = sha256_file(&dir.join(name))?;
        if &actual != digest {
            return Err(EtlError::Validation(format!("{name} does not match its manifest digest")));
        }
    }
    let catalog = manifest.catalog.clone();
    if catalog.hash() != manifest.catalog_hash {
        return Err(EtlError::Validation("catalog does not match its recorded hash".into()));
    }

    let mut stays = Vec::new();
    for rec in reader(dir, "stays.csv")?.records() {
        let rec = rec.map_err(|e| EtlError::Csv("stays.csv".into(), e.to_string()))?;
        let mut statics = BTreeMap::new();
        for (i, spec) in catalog.static_vars.iter().enumerate() {
            let raw = rec.get(3 + i).unwrap_or("");
            if raw.is_empty() {
                continue;
            }
            let v = match spec.kind {
                StaticKind::Numeric => StaticValue::Numeric(parse_num(Some(raw), "stays.csv")?),
                StaticKind::Categorical => StaticValue::Categorical(raw.to_string()),
            };
            statics.insert(i, v);
        }
        stays.push(StayRecord {
            patient_id: rec.get(0).unwrap_or("").to_string(),
            stay_id: rec.get(1).unwrap_or("").to_string(),
            los_minutes: parse_num(rec.get(2), "stays.csv")?,
            statics,
        });
    }

    let mut shifts = Vec::new();
    let mut assignments = Vec::new();
    for rec in reader(dir, "shifts.csv")?.records() {
        let rec = rec.map_err(|e| EtlError::Csv("shifts.csv".into(), e.to_string()))?;
        let label: AcuityLabel = rec
            .get(5)
            .unwrap_or("")
            .parse()
            .map_err(|e: String| EtlError::Parse(format!("shifts.csv: {e}")))?;
        let delirium = match rec.get(6).unwrap_or("") {
            "1" => Some(true),
            "0" => Some(false),
            _ => None,
        };
        let fold = Assignment::parse_field(rec.get(7).unwrap_or(""))
            .ok_or_else(|| EtlError::Parse("shifts.csv: bad fold field".into()))?;
        shifts.push(RawShift {
            patient_id: rec.get(1).unwrap_or("").to_string(),
            stay_id: rec.get(2).unwrap_or("").to_string(),
            shift_index: parse_num(rec.get(3), "shifts.csv")?,
            shift_start: parse_num(rec.get(4), "shifts.csv")?,
            window: Vec::new(),
            label,
            delirium,
        });
        assignments.push(fold);
    }

    let index = catalog.index();
    for rec in reader(dir, "windows.csv")?.records() {
        let rec = rec.map_err(|e| EtlError::Csv("windows.csv".into(), e.to_string()))?;
        let row: usize = parse_num(rec.get(0), "windows.csv")?;
        let code = index
            .temporal(rec.get(2).unwrap_or(""))
            .ok_or_else(|| EtlError::Parse("windows.csv: unknown variable".into()))?;
        let shift = shifts
            .get_mut(row)
            .ok_or_else(|| EtlError::Parse(format!("windows.csv: row {row} has no shift")))?;
        shift.window.push(WindowEvent {
            offset: parse_num(rec.get(1), "windows.csv")?,
            code,
            value: parse_num(rec.get(3), "windows.csv")?,
        });
    }

    let mut patients = BTreeMap::new();
    for (s, a) in shifts.iter().zip(&assignments) {
        if let Some(prev) = patients.insert(s.patient_id.clone(), *a) {
            if prev != *a {
                return Err(EtlError::Validation(format!(
                    "patient {} appears in more than one fold",
                    s.patient_id
                )));
            }
        }
    }
    let split = DatasetSplit {
        seed: manifest.seed,
        fold_count: manifest.fold_count,
        test_fraction: manifest.config.test_fraction,
        patients,
        shifts: assignments,
    };
    Ok(Bundle {
        catalog,
        stays,
        shifts,
        split,
        manifest,
    })
}
