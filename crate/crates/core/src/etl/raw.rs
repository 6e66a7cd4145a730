//! Reading the three raw input files and merging encounters into stays.
//!
//! `encounters.csv`: `patient_id,encounter_id,admit_iso8601,discharge_iso8601,death_iso8601`
//! (death may be empty). `static.csv`: `patient_id,encounter_id,name,value`.
//! `events.csv`: `patient_id,encounter_id,time_iso8601,name,value,unit`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use super::catalog::{canonical_unit, Catalog};
use super::EtlError;
use crate::phenotype::{ScoreKind, ScoreValue};

pub const TIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";
/// Encounters separated by less than this are one stay.
pub const MERGE_GAP_MINUTES: i64 = 1440;

pub fn parse_time(raw: &str) -> Option<NaiveDateTime> {
    let raw = raw.trim();
    NaiveDateTime::parse_from_str(raw, TIME_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(raw, "%Y-%m-%dT%H:%M"))
        .or_else(|_| NaiveDateTime::parse_from_str(raw, "%Y-%m-%d %H:%M:%S"))
        .ok()
}

pub fn format_time(t: NaiveDateTime) -> String {
    t.format(TIME_FORMAT).to_string()
}

/// A temporal event after name canonicalization and unit validation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawEvent {
    pub time: NaiveDateTime,
    pub code: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawEncounter {
    pub patient_id: String,
    pub encounter_id: String,
    pub admit: NaiveDateTime,
    pub discharge: NaiveDateTime,
    pub death: Option<NaiveDateTime>,
    /// Canonical static name to raw value; first recorded value wins.
    pub statics: BTreeMap<String, String>,
    pub events: Vec<RawEvent>,
}

impl RawEncounter {
    pub fn los_minutes(&self) -> i64 {
        (self.discharge - self.admit).num_minutes()
    }
}

/// Row counts from reading the raw files.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadCounts {
    pub encounters: usize,
    pub static_rows: usize,
    pub static_rejected_unknown: usize,
    pub event_rows: usize,
    pub events_rejected_unknown_variable: usize,
    pub events_rejected_unit_mismatch: usize,
    pub events_rejected_invalid_value: usize,
    pub events_rejected_unknown_encounter: usize,
    pub events_rejected_out_of_stay: usize,
    pub events_accepted: usize,
}

fn open(path: &Path) -> Result<csv::Reader<std::fs::File>, EtlError> {
    if !path.exists() {
        return Err(EtlError::MissingInput(path.display().to_string()));
    }
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| EtlError::Csv(path.display().to_string(), e.to_string()))
}

fn field<'a>(rec: &'a csv::StringRecord, i: usize, file: &str, line: u64) -> Result<&'a str, EtlError> {
    rec.get(i)
        .ok_or_else(|| EtlError::Parse(format!("{file}:{line}: missing column {i}")))
}

/// Reads encounters, static values and events from `dir`.
///
/// Events for unknown variables, with a unit that differs from the declared
/// one, with an unparsable value, or outside `[admit - history, discharge]`
/// are rejected and counted. Unknown encounter ids in events are counted too.
pub fn read_raw_dir(
    dir: &Path,
    catalog: &Catalog,
    history_minutes: i64,
) -> Result<(Vec<RawEncounter>, ReadCounts), EtlError> {
    let index = catalog.index();
    let mut counts = ReadCounts::default();

    let enc_path = dir.join("encounters.csv");
    let static_path = dir.join("static.csv");
    let events_path = dir.join("events.csv");
    for p in [&enc_path, &static_path, &events_path] {
        if !p.exists() {
            return Err(EtlError::MissingInput(p.display().to_string()));
        }
    }

    let mut encounters: Vec<RawEncounter> = Vec::new();
    let mut by_key: HashMap<(String, String), usize> = HashMap::new();
    let mut rdr = open(&enc_path)?;
    for (line, rec) in rdr.records().enumerate() {
        let line = line as u64 + 2;
        let rec = rec.map_err(|e| EtlError::Csv("encounters.csv".into(), e.to_string()))?;
        let patient_id = field(&rec, 0, "encounters.csv", line)?.trim().to_string();
        let encounter_id = field(&rec, 1, "encounters.csv", line)?.trim().to_string();
        let admit = parse_time(field(&rec, 2, "encounters.csv", line)?)
            .ok_or_else(|| EtlError::Parse(format!("encounters.csv:{line}: bad admit time")))?;
        let discharge = parse_time(field(&rec, 3, "encounters.csv", line)?)
            .ok_or_else(|| EtlError::Parse(format!("encounters.csv:{line}: bad discharge time")))?;
        let death = match rec.get(4).map(str::trim) {
            None | Some("") => None,
            Some(raw) => Some(
                parse_time(raw)
                    .ok_or_else(|| EtlError::Parse(format!("encounters.csv:{line}: bad death time")))?,
            ),
        };
        if discharge <= admit {
            return Err(EtlError::Validation(format!(
                "encounter {encounter_id}: discharge is not after admission"
            )));
        }
        let key = (patient_id.clone(), encounter_id.clone());
        if by_key.insert(key, encounters.len()).is_some() {
            return Err(EtlError::Validation(format!("duplicate encounter {encounter_id}")));
        }
        encounters.push(RawEncounter {
            patient_id,
            encounter_id,
            admit,
            discharge,
            death,
            statics: BTreeMap::new(),
            events: Vec::new(),
        });
    }
    counts.encounters = encounters.len();

    let mut rdr = open(&static_path)?;
    for (line, rec) in rdr.records().enumerate() {
        let line = line as u64 + 2;
        let rec = rec.map_err(|e| EtlError::Csv("static.csv".into(), e.to_string()))?;
        counts.static_rows += 1;
        let key = (
            field(&rec, 0, "static.csv", line)?.trim().to_string(),
            field(&rec, 1, "static.csv", line)?.trim().to_string(),
        );
        let name = field(&rec, 2, "static.csv", line)?;
        let value = field(&rec, 3, "static.csv", line)?.trim().to_string();
        let (Some(&enc), Some(var)) = (by_key.get(&key), index.static_var(name)) else {
            counts.static_rejected_unknown += 1;
            continue;
        };
        let name = catalog.static_vars[var].name.clone();
        encounters[enc].statics.entry(name).or_insert(value);
    }

    let units: Vec<String> = catalog.temporal.iter().map(|v| v.unit.clone()).collect();
    let score_kinds: HashMap<usize, ScoreKind> = [ScoreKind::Rass, ScoreKind::Cam, ScoreKind::Gcs]
        .into_iter()
        .map(|k| (catalog.score_code(k), k))
        .collect();
    let mut rdr = open(&events_path)?;
    let mut rec = csv::StringRecord::new();
    let mut line = 1u64;
    let mut last_key: Option<((String, String), usize)> = None;
    while rdr
        .read_record(&mut rec)
        .map_err(|e| EtlError::Csv("events.csv".into(), e.to_string()))?
    {
        line += 1;
        counts.event_rows += 1;
        let pid = field(&rec, 0, "events.csv", line)?.trim();
        let eid = field(&rec, 1, "events.csv", line)?.trim();
        let enc = match &last_key {
            Some(((p, e), idx)) if p == pid && e == eid => *idx,
            _ => match by_key.get(&(pid.to_string(), eid.to_string())) {
                Some(&idx) => {
                    last_key = Some(((pid.to_string(), eid.to_string()), idx));
                    idx
                }
                None => {
                    counts.events_rejected_unknown_encounter += 1;
                    continue;
                }
            },
        };
        let Some(code) = index.temporal(field(&rec, 3, "events.csv", line)?) else {
            counts.events_rejected_unknown_variable += 1;
            continue;
        };
        if canonical_unit(field(&rec, 5, "events.csv", line)?) != units[code] {
            counts.events_rejected_unit_mismatch += 1;
            continue;
        }
        let raw_value = field(&rec, 4, "events.csv", line)?;
        let value = match score_kinds.get(&code) {
            Some(&kind) => match ScoreValue::parse(kind, raw_value) {
                Ok(v) => v.as_f64(),
                Err(_) => {
                    counts.events_rejected_invalid_value += 1;
                    continue;
                }
            },
            None => match raw_value.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => v,
                _ => {
                    counts.events_rejected_invalid_value += 1;
                    continue;
                }
            },
        };
        let Some(time) = parse_time(field(&rec, 2, "events.csv", line)?) else {
            counts.events_rejected_invalid_value += 1;
            continue;
        };
        let e = &mut encounters[enc];
        let offset = (time - e.admit).num_minutes();
        if offset < -history_minutes || time > e.discharge {
            counts.events_rejected_out_of_stay += 1;
            continue;
        }
        e.events.push(RawEvent { time, code, value });
        counts.events_accepted += 1;
    }
    Ok((encounters, counts))
}

/// Merges one patient's encounters that start less than 24 hours after the
/// previous one ended. Input must be sorted by admission time and must not
/// overlap.
pub fn merge_encounters(encounters: Vec<RawEncounter>) -> Result<Vec<RawEncounter>, EtlError> {
    let mut merged: Vec<RawEncounter> = Vec::with_capacity(encounters.len());
    for enc in encounters {
        let Some(prev) = merged.last_mut() else {
            merged.push(enc);
            continue;
        };
        if enc.patient_id != prev.patient_id {
            return Err(EtlError::Validation(format!(
                "merge_encounters called with patients {} and {}",
                prev.patient_id, enc.patient_id
            )));
        }
        if enc.admit < prev.admit {
            return Err(EtlError::Validation(format!(
                "encounters of patient {} are not sorted by admission",
                enc.patient_id
            )));
        }
        if enc.admit < prev.discharge {
            return Err(EtlError::Validation(format!(
                "encounters {} and {} overlap",
                prev.encounter_id, enc.encounter_id
            )));
        }
        let gap = (enc.admit - prev.discharge).num_minutes();
        if gap < MERGE_GAP_MINUTES {
            prev.discharge = enc.discharge;
            if enc.death.is_some() {
                prev.death = enc.death;
            }
            for (k, v) in enc.statics {
                prev.statics.entry(k).or_insert(v);
            }
            prev.events.extend(enc.events);
        } else {
            merged.push(enc);
        }
    }
    Ok(merged)
}

/// Groups encounters by patient (sorted by patient id, then admission) and
/// merges each patient's encounters.
pub fn merge_all(mut encounters: Vec<RawEncounter>) -> Result<Vec<RawEncounter>, EtlError> {
    encounters.sort_by(|a, b| {
        (a.patient_id.as_str(), a.admit, a.encounter_id.as_str())
            .cmp(&(b.patient_id.as_str(), b.admit, b.encounter_id.as_str()))
    });
    let mut out = Vec::with_capacity(encounters.len());
    let mut group: Vec<RawEncounter> = Vec::new();
    for enc in encounters {
        if group.first().is_some_and(|g| g.patient_id != enc.patient_id) {
            out.extend(merge_encounters(std::mem::take(&mut group))?);
        }
        group.push(enc);
    }
    if !group.is_empty() {
        out.extend(merge_encounters(group)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Duration, NaiveDate};

    fn enc(id: &str, admit_h: i64, discharge_h: i64) -> RawEncounter {
        let base = NaiveDate::from_ymd_opt(2018, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        RawEncounter {
            patient_id: "P1".into(),
            encounter_id: id.into(),
            admit: base + Duration::hours(admit_h),
            discharge: base + Duration::hours(discharge_h),
            death: None,
            statics: BTreeMap::new(),
            events: vec![RawEvent {
                time: base + Duration::hours(admit_h),
                code: 0,
                value: 1.0,
            }],
        }
    }

    #[test]
    fn merges_within_24_hours() {
        let merged = merge_encounters(vec![enc("a", 0, 48), enc("b", 68, 100)]).unwrap();
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].encounter_id, "a");
        assert_eq!(merged[0].events.len(), 2);
        assert_eq!(merged[0].los_minutes(), 100 * 60);
    }

    #[test]
    fn keeps_separate_beyond_24_hours() {
        let merged = merge_encounters(vec![enc("a", 0, 48), enc("b", 78, 100)]).unwrap();
        assert_eq!(merged.len(), 2);
    }

    #[test]
    fn single_is_identity() {
        let single = enc("a", 0, 48);
        let merged = merge_encounters(vec![single.clone()]).unwrap();
        assert_eq!(merged, vec![single]);
    }

    #[test]
    fn overlap_is_rejected() {
        assert!(merge_encounters(vec![enc("a", 0, 48), enc("b", 40, 100)]).is_err());
    }

    #[test]
    fn time_formats() {
        assert!(parse_time("2018-01-01T07:00:00").is_some());
        assert!(parse_time("2018-01-01T07:00").is_some());
        assert!(parse_time("yesterday").is_none());
        let t = parse_time("2018-01-01T07:05:00").unwrap();
        assert_eq!(format_time(t), "2018-01-01T07:05:00");
    }
}
