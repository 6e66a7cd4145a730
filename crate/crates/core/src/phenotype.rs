//! Brain-acuity phenotyping.
//!
//! Each 12-hour nursing shift gets one of four labels (normal, delirium,
//! coma, dead) from the RASS, CAM and GCS assessments recorded during the
//! shift or carried forward from at most 12 hours before it, or is marked
//! excluded when no assessment is available.

use std::fmt;
use std::str::FromStr;

use chrono::{Duration, NaiveDateTime, NaiveTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minutes since ICU admission.
pub type Minutes = i64;

/// Length of a nursing shift and of the carry-forward horizon.
pub const SHIFT_MINUTES: Minutes = 720;
/// Scores older than this at the query time are treated as missing.
pub const CARRY_FORWARD_MINUTES: Minutes = 720;

pub const RASS_RANGE: (i8, i8) = (-5, 4);
pub const GCS_RANGE: (u8, u8) = (3, 15);
/// GCS at or below this value indicates coma.
pub const GCS_COMA_MAX: u8 = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhenotypeError {
    #[error("RASS {0} outside [-5, 4]")]
    RassOutOfRange(i64),
    #[error("GCS {0} outside [3, 15]")]
    GcsOutOfRange(i64),
    #[error("CAM value {0:?} is neither positive nor negative")]
    BadCam(String),
    #[error("score value {0:?} is not an integer")]
    NotAnInteger(String),
    #[error("score time {0} is negative")]
    NegativeTime(Minutes),
    #[error("score stream is not sorted by time (index {index})")]
    Unsorted { index: usize },
    #[error("score stream mixes {expected:?} and {found:?}")]
    MixedKinds { expected: ScoreKind, found: ScoreKind },
    #[error("shift {index} is empty or overlaps the previous shift")]
    OverlappingShifts { index: usize },
    #[error("unknown score kind {0:?}")]
    UnknownKind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cam {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScoreKind {
    Rass,
    Cam,
    Gcs,
}

impl FromStr for ScoreKind {
    type Err = PhenotypeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rass" => Ok(ScoreKind::Rass),
            "cam" => Ok(ScoreKind::Cam),
            "gcs" => Ok(ScoreKind::Gcs),
            other => Err(PhenotypeError::UnknownKind(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreValue {
    Rass(i8),
    Cam(Cam),
    Gcs(u8),
}

impl ScoreValue {
    pub fn kind(&self) -> ScoreKind {
        match self {
            ScoreValue::Rass(_) => ScoreKind::Rass,
            ScoreValue::Cam(_) => ScoreKind::Cam,
            ScoreValue::Gcs(_) => ScoreKind::Gcs,
        }
    }

    /// Parses a recorded value for `kind`. CAM accepts `positive`/`negative`
    /// or the numeric encoding 1/0 used in the events file.
    pub fn parse(kind: ScoreKind, raw: &str) -> Result<Self, PhenotypeError> {
        let raw = raw.trim();
        match kind {
            ScoreKind::Cam => match raw.to_ascii_lowercase().as_str() {
                "positive" | "pos" | "1" | "1.0" => Ok(ScoreValue::Cam(Cam::Positive)),
                "negative" | "neg" | "0" | "0.0" => Ok(ScoreValue::Cam(Cam::Negative)),
                _ => Err(PhenotypeError::BadCam(raw.to_string())),
            },
            ScoreKind::Rass | ScoreKind::Gcs => {
                let value: f64 = raw
                    .parse()
                    .map_err(|_| PhenotypeError::NotAnInteger(raw.to_string()))?;
                if !value.is_finite() || value.fract() != 0.0 {
                    return Err(PhenotypeError::NotAnInteger(raw.to_string()));
                }
                Self::from_numeric(kind, value as i64)
            }
        }
    }

    pub fn from_numeric(kind: ScoreKind, value: i64) -> Result<Self, PhenotypeError> {
        match kind {
            ScoreKind::Rass => {
                if value < RASS_RANGE.0 as i64 || value > RASS_RANGE.1 as i64 {
                    Err(PhenotypeError::RassOutOfRange(value))
                } else {
                    Ok(ScoreValue::Rass(value as i8))
                }
            }
            ScoreKind::Gcs => {
                if value < GCS_RANGE.0 as i64 || value > GCS_RANGE.1 as i64 {
                    Err(PhenotypeError::GcsOutOfRange(value))
                } else {
                    Ok(ScoreValue::Gcs(value as u8))
                }
            }
            ScoreKind::Cam => match value {
                1 => Ok(ScoreValue::Cam(Cam::Positive)),
                0 => Ok(ScoreValue::Cam(Cam::Negative)),
                v => Err(PhenotypeError::BadCam(v.to_string())),
            },
        }
    }

    /// Numeric encoding used when the score is also a model feature.
    pub fn as_f64(&self) -> f64 {
        match *self {
            ScoreValue::Rass(v) => v as f64,
            ScoreValue::Gcs(v) => v as f64,
            ScoreValue::Cam(Cam::Positive) => 1.0,
            ScoreValue::Cam(Cam::Negative) => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedScore {
    pub time: Minutes,
    pub value: ScoreValue,
}

impl TimedScore {
    pub fn new(time: Minutes, value: ScoreValue) -> Result<Self, PhenotypeError> {
        if time < 0 {
            return Err(PhenotypeError::NegativeTime(time));
        }
        Ok(Self { time, value })
    }

    pub fn kind(&self) -> ScoreKind {
        self.value.kind()
    }
}

/// The assessments in force at the end of a shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ScoreSnapshot {
    pub rass: Option<i8>,
    pub cam: Option<Cam>,
    pub gcs: Option<u8>,
    pub died_in_shift: bool,
}

impl ScoreSnapshot {
    pub fn validate(&self) -> Result<(), PhenotypeError> {
        if let Some(r) = self.rass {
            if !(RASS_RANGE.0..=RASS_RANGE.1).contains(&r) {
                return Err(PhenotypeError::RassOutOfRange(r as i64));
            }
        }
        if let Some(g) = self.gcs {
            if !(GCS_RANGE.0..=GCS_RANGE.1).contains(&g) {
                return Err(PhenotypeError::GcsOutOfRange(g as i64));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcuityLabel {
    Normal,
    Delirium,
    Coma,
    Dead,
    Excluded,
}

impl AcuityLabel {
    /// Labels a model is trained on, in class-index order.
    pub const CLASSES: [AcuityLabel; 4] = [
        AcuityLabel::Normal,
        AcuityLabel::Delirium,
        AcuityLabel::Coma,
        AcuityLabel::Dead,
    ];

    pub fn class_index(self) -> Option<usize> {
        match self {
            AcuityLabel::Normal => Some(0),
            AcuityLabel::Delirium => Some(1),
            AcuityLabel::Coma => Some(2),
            AcuityLabel::Dead => Some(3),
            AcuityLabel::Excluded => None,
        }
    }

    pub fn from_class_index(index: usize) -> Option<Self> {
        Self::CLASSES.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AcuityLabel::Normal => "normal",
            AcuityLabel::Delirium => "delirium",
            AcuityLabel::Coma => "coma",
            AcuityLabel::Dead => "dead",
            AcuityLabel::Excluded => "excluded",
        }
    }
}

impl fmt::Display for AcuityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AcuityLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" => Ok(AcuityLabel::Normal),
            "delirium" => Ok(AcuityLabel::Delirium),
            "coma" => Ok(AcuityLabel::Coma),
            "dead" => Ok(AcuityLabel::Dead),
            "excluded" => Ok(AcuityLabel::Excluded),
            other => Err(format!("unknown acuity label {other:?}")),
        }
    }
}

/// Most recent score at or before `query_time`, if it is at most
/// [`CARRY_FORWARD_MINUTES`] old. `scores` must hold a single kind, sorted by time.
pub fn carry_forward(
    scores: &[TimedScore],
    query_time: Minutes,
) -> Result<Option<ScoreValue>, PhenotypeError> {
    check_stream(scores)?;
    // First index whose time is after the query.
    let after = scores.partition_point(|s| s.time <= query_time);
    if after == 0 {
        return Ok(None);
    }
    let latest = &scores[after - 1];
    if query_time - latest.time <= CARRY_FORWARD_MINUTES {
        Ok(Some(latest.value))
    } else {
        Ok(None)
    }
}

fn check_stream(scores: &[TimedScore]) -> Result<(), PhenotypeError> {
    let Some(first) = scores.first() else {
        return Ok(());
    };
    let kind = first.kind();
    for (index, pair) in scores.windows(2).enumerate() {
        if pair[1].time < pair[0].time {
            return Err(PhenotypeError::Unsorted { index: index + 1 });
        }
        if pair[1].kind() != kind {
            return Err(PhenotypeError::MixedKinds {
                expected: kind,
                found: pair[1].kind(),
            });
        }
    }
    Ok(())
}

/// Applies the phenotype decision logic to one shift's snapshot.
///
/// Precedence: death, all-missing exclusion, deep sedation (RASS < -3),
/// GCS coma when RASS is missing, the GCS tiebreak at RASS = -3, then CAM
/// for lighter sedation levels. Gaps the decision logic leaves open fall
/// back to GCS (coma at <= 8, otherwise normal).
pub fn label_shift(snapshot: &ScoreSnapshot) -> AcuityLabel {
    if snapshot.died_in_shift {
        return AcuityLabel::Dead;
    }
    let gcs_coma = snapshot.gcs.map(|g| g <= GCS_COMA_MAX);
    match (snapshot.rass, snapshot.cam, snapshot.gcs) {
        (None, None, None) => AcuityLabel::Excluded,
        (Some(r), _, _) if r < -3 => AcuityLabel::Coma,
        (Some(-3), _, _) => match gcs_coma {
            Some(false) => AcuityLabel::Delirium,
            // Tiebreak cannot run without GCS; the moderate-sedation level
            // is assigned to coma.
            Some(true) | None => AcuityLabel::Coma,
        },
        (None, cam, _) => {
            if gcs_coma == Some(true) {
                AcuityLabel::Coma
            } else {
                match cam {
                    Some(Cam::Positive) => AcuityLabel::Delirium,
                    _ => AcuityLabel::Normal,
                }
            }
        }
        (Some(_), Some(Cam::Positive), _) => AcuityLabel::Delirium,
        (Some(_), Some(Cam::Negative), _) => AcuityLabel::Normal,
        (Some(_), None, _) => {
            if gcs_coma == Some(true) {
                AcuityLabel::Coma
            } else {
                AcuityLabel::Normal
            }
        }
    }
}

/// One shift of a stay, in minutes since ICU admission. `start < end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftSpan {
    pub index: usize,
    pub start: Minutes,
    pub end: Minutes,
}

/// Score streams and death time for one ICU stay.
#[derive(Debug, Clone, Default)]
pub struct StayScores {
    pub rass: Vec<TimedScore>,
    pub cam: Vec<TimedScore>,
    pub gcs: Vec<TimedScore>,
    pub death_time: Option<Minutes>,
}

impl StayScores {
    /// Splits a mixed, time-sorted stream by kind. Negative times (history
    /// before admission) are dropped.
    pub fn from_mixed(scores: &[TimedScore], death_time: Option<Minutes>) -> Self {
        let mut out = StayScores {
            death_time,
            ..Default::default()
        };
        for s in scores.iter().filter(|s| s.time >= 0) {
            match s.kind() {
                ScoreKind::Rass => out.rass.push(*s),
                ScoreKind::Cam => out.cam.push(*s),
                ScoreKind::Gcs => out.gcs.push(*s),
            }
        }
        for stream in [&mut out.rass, &mut out.cam, &mut out.gcs] {
            stream.sort_by_key(|s| s.time);
        }
        out
    }

    /// Scores in force for `span`: the latest one at or before the shift end
    /// if it lies inside the shift, otherwise the one carried forward to the
    /// shift start.
    pub fn snapshot_for(&self, span: &ShiftSpan, died: bool) -> Result<ScoreSnapshot, PhenotypeError> {
        let rass = match shift_value(&self.rass, span)? {
            Some(ScoreValue::Rass(r)) => Some(r),
            _ => None,
        };
        let cam = match shift_value(&self.cam, span)? {
            Some(ScoreValue::Cam(c)) => Some(c),
            _ => None,
        };
        let gcs = match shift_value(&self.gcs, span)? {
            Some(ScoreValue::Gcs(g)) => Some(g),
            _ => None,
        };
        let snapshot = ScoreSnapshot {
            rass,
            cam,
            gcs,
            died_in_shift: died,
        };
        snapshot.validate()?;
        Ok(snapshot)
    }
}

/// Value of one score stream for a shift: carried forward to the shift end,
/// or failing that to the shift start.
pub fn shift_value(scores: &[TimedScore], span: &ShiftSpan) -> Result<Option<ScoreValue>, PhenotypeError> {
    match carry_forward(scores, span.end)? {
        Some(v) => Ok(Some(v)),
        None => carry_forward(scores, span.start),
    }
}

/// Labels every shift of a stay from the scores in force for it.
///
/// A shift is dead when the death time falls in `[start, end)` (the final
/// shift also includes its end); no shifts are labeled after it.
pub fn label_stay(
    stay: &StayScores,
    shifts: &[ShiftSpan],
) -> Result<Vec<(usize, AcuityLabel)>, PhenotypeError> {
    for (i, shift) in shifts.iter().enumerate() {
        if shift.start >= shift.end || (i > 0 && shift.start < shifts[i - 1].end) {
            return Err(PhenotypeError::OverlappingShifts { index: shift.index });
        }
    }
    let mut labels = Vec::with_capacity(shifts.len());
    for (i, shift) in shifts.iter().enumerate() {
        let last = i + 1 == shifts.len();
        let died = stay.death_time.is_some_and(|d| {
            d >= shift.start && (d < shift.end || (last && d == shift.end))
        });
        let snapshot = stay.snapshot_for(shift, died)?;
        labels.push((shift.index, label_shift(&snapshot)));
        if died {
            break;
        }
    }
    Ok(labels)
}

/// Shift layout of one stay on the 07:00 / 19:00 clock grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShiftGrid {
    /// Shifts whose start lies in `[admit, discharge)`, indexed from 0.
    pub shifts: Vec<ShiftSpan>,
    /// Grid shifts that overlap the stay but began before admission.
    pub started_before_admission: usize,
}

/// Builds the 12-hour shift grid anchored at 07:00 local time for a stay.
pub fn shift_grid(admit: NaiveDateTime, discharge: NaiveDateTime) -> ShiftGrid {
    if discharge <= admit {
        return ShiftGrid {
            shifts: Vec::new(),
            started_before_admission: 0,
        };
    }
    let day = admit.date();
    let seven = NaiveTime::from_hms_opt(7, 0, 0).expect("valid time");
    let mut boundary = day.and_time(seven) - Duration::hours(12);
    while boundary + Duration::hours(12) <= admit {
        boundary += Duration::hours(12);
    }
    let mut started_before_admission = 0;
    if boundary < admit {
        started_before_admission = 1;
        boundary += Duration::hours(12);
    }
    let mut shifts = Vec::new();
    while boundary < discharge {
        let start = (boundary - admit).num_minutes();
        shifts.push(ShiftSpan {
            index: shifts.len(),
            start,
            end: start + SHIFT_MINUTES,
        });
        boundary += Duration::hours(12);
    }
    ShiftGrid {
        shifts,
        started_before_admission,
    }
}
