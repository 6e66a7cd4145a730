//! Stay-level labeling, shift filtering and window extraction.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::catalog::{Catalog, StaticKind};
use super::raw::RawEncounter;
use super::EtlError;
use crate::phenotype::{
    self, AcuityLabel, Cam, Minutes, ScoreKind, ScoreValue, ShiftSpan, StayScores, TimedScore,
    SHIFT_MINUTES,
};

/// Minimum ICU stay duration and minimum delay between admission and shift start.
pub const MIN_OBSERVATION_MINUTES: Minutes = 720;
pub const DEFAULT_MAX_SEQUENCE_LENGTH: usize = 12000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StaticValue {
    Numeric(f64),
    Categorical(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StayRecord {
    pub patient_id: String,
    pub stay_id: String,
    pub los_minutes: Minutes,
    /// Keyed by static catalog index; absent means missing.
    pub statics: BTreeMap<usize, StaticValue>,
}

/// One observation in a shift's input window, before normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowEvent {
    /// Event time minus shift start, in `(-720, 0]`.
    pub offset: Minutes,
    pub code: usize,
    pub value: f64,
}

/// A retained, labeled shift with its raw 12-hour input window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawShift {
    pub patient_id: String,
    pub stay_id: String,
    pub shift_index: usize,
    /// Minutes from admission to shift start.
    pub shift_start: Minutes,
    pub window: Vec<WindowEvent>,
    pub label: AcuityLabel,
    /// CAM in force at the end of the shift, when there is one.
    pub delirium: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabeledShift {
    pub span: ShiftSpan,
    pub label: AcuityLabel,
}

/// Shift counts per filter stage. `grid_shifts` equals the sum of the
/// dropped counts and `retained`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftFunnel {
    pub stays: usize,
    pub grid_shifts: usize,
    pub dropped_outside_stay: usize,
    pub dropped_after_death: usize,
    pub dropped_short_stay: usize,
    pub dropped_early_shift: usize,
    pub dropped_excluded: usize,
    pub retained: usize,
    pub static_invalid_values: usize,
    pub windows_clipped: usize,
}

impl ShiftFunnel {
    pub fn add(&mut self, other: &ShiftFunnel) {
        self.stays += other.stays;
        self.grid_shifts += other.grid_shifts;
        self.dropped_outside_stay += other.dropped_outside_stay;
        self.dropped_after_death += other.dropped_after_death;
        self.dropped_short_stay += other.dropped_short_stay;
        self.dropped_early_shift += other.dropped_early_shift;
        self.dropped_excluded += other.dropped_excluded;
        self.retained += other.retained;
        self.static_invalid_values += other.static_invalid_values;
        self.windows_clipped += other.windows_clipped;
    }

    pub fn is_balanced(&self) -> bool {
        self.grid_shifts
            == self.dropped_outside_stay
                + self.dropped_after_death
                + self.dropped_short_stay
                + self.dropped_early_shift
                + self.dropped_excluded
                + self.retained
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FilterCounts {
    pub short_stay: usize,
    pub early_shift: usize,
    pub excluded: usize,
}

/// Drops every shift of a stay shorter than 12 hours, shifts starting less
/// than 12 hours after admission, and excluded shifts.
pub fn filter_shifts(
    los_minutes: Minutes,
    shifts: Vec<LabeledShift>,
) -> (Vec<LabeledShift>, FilterCounts) {
    let mut counts = FilterCounts::default();
    if los_minutes < MIN_OBSERVATION_MINUTES {
        counts.short_stay = shifts.len();
        return (Vec::new(), counts);
    }
    let mut kept = Vec::with_capacity(shifts.len());
    for s in shifts {
        if s.span.start < MIN_OBSERVATION_MINUTES {
            counts.early_shift += 1;
        } else if s.label == AcuityLabel::Excluded {
            counts.excluded += 1;
        } else {
            kept.push(s);
        }
    }
    (kept, counts)
}

/// Keeps the `max_len` most recent observations, preserving order.
pub fn clip_sequence<T: Clone>(window: &[T], max_len: usize) -> Vec<T> {
    let max_len = max_len.max(1);
    if window.len() <= max_len {
        window.to_vec()
    } else {
        window[window.len() - max_len..].to_vec()
    }
}

pub(crate) fn scores_of(stay: &RawEncounter, catalog: &Catalog) -> Vec<TimedScore> {
    let codes = [ScoreKind::Rass, ScoreKind::Cam, ScoreKind::Gcs].map(|k| (catalog.score_code(k), k));
    let mut scores: Vec<TimedScore> = stay
        .events
        .iter()
        .filter_map(|e| {
            let kind = codes.iter().find(|(c, _)| *c == e.code)?.1;
            let time = (e.time - stay.admit).num_minutes();
            let value = ScoreValue::from_numeric(kind, e.value as i64).ok()?;
            TimedScore::new(time, value).ok()
        })
        .collect();
    scores.sort_by_key(|s| s.time);
    scores
}

/// Labels the shifts of one merged stay and returns the grid bookkeeping.
pub fn label_merged_stay(
    stay: &RawEncounter,
    catalog: &Catalog,
) -> Result<(Vec<LabeledShift>, StayScores, ShiftFunnel), EtlError> {
    let grid = phenotype::shift_grid(stay.admit, stay.discharge);
    let death = stay.death.map(|d| (d - stay.admit).num_minutes());
    let scores = StayScores::from_mixed(&scores_of(stay, catalog), death);
    let labels = phenotype::label_stay(&scores, &grid.shifts)?;
    let funnel = ShiftFunnel {
        stays: 1,
        grid_shifts: grid.shifts.len() + grid.started_before_admission,
        dropped_outside_stay: grid.started_before_admission,
        dropped_after_death: grid.shifts.len() - labels.len(),
        ..Default::default()
    };
    let labeled = labels
        .into_iter()
        .map(|(index, label)| LabeledShift {
            span: grid.shifts[index],
            label,
        })
        .collect();
    Ok((labeled, scores, funnel))
}

fn parse_statics(stay: &RawEncounter, catalog: &Catalog, funnel: &mut ShiftFunnel) -> BTreeMap<usize, StaticValue> {
    let mut out = BTreeMap::new();
    for (i, spec) in catalog.static_vars.iter().enumerate() {
        let Some(raw) = stay.statics.get(&spec.name) else {
            continue;
        };
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        match spec.kind {
            StaticKind::Numeric => match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => {
                    out.insert(i, StaticValue::Numeric(v));
                }
                _ => funnel.static_invalid_values += 1,
            },
            StaticKind::Categorical => {
                out.insert(i, StaticValue::Categorical(raw.to_lowercase()));
            }
        }
    }
    out
}

fn extract_stay(
    stay: &RawEncounter,
    catalog: &Catalog,
    max_sequence_length: usize,
) -> Result<(StayRecord, Vec<RawShift>, ShiftFunnel), EtlError> {
    let (labeled, scores, mut funnel) = label_merged_stay(stay, catalog)?;
    let los = stay.los_minutes();
    let (kept, counts) = filter_shifts(los, labeled);
    funnel.dropped_short_stay = counts.short_stay;
    funnel.dropped_early_shift = counts.early_shift;
    funnel.dropped_excluded = counts.excluded;
    funnel.retained = kept.len();

    let mut events: Vec<(Minutes, usize, f64)> = stay
        .events
        .iter()
        .map(|e| ((e.time - stay.admit).num_minutes(), e.code, e.value))
        .collect();
    events.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut shifts = Vec::with_capacity(kept.len());
    for s in kept {
        let start = s.span.start;
        let lo = events.partition_point(|e| e.0 <= start - SHIFT_MINUTES);
        let hi = events.partition_point(|e| e.0 <= start);
        let window: Vec<WindowEvent> = events[lo..hi]
            .iter()
            .map(|&(t, code, value)| WindowEvent {
                offset: t - start,
                code,
                value,
            })
            .collect();
        if window.len() > max_sequence_length {
            funnel.windows_clipped += 1;
        }
        let window = clip_sequence(&window, max_sequence_length);
        let delirium = match phenotype::shift_value(&scores.cam, &s.span)? {
            Some(ScoreValue::Cam(Cam::Positive)) => Some(true),
            Some(ScoreValue::Cam(Cam::Negative)) => Some(false),
            _ => None,
        };
        shifts.push(RawShift {
            patient_id: stay.patient_id.clone(),
            stay_id: stay.encounter_id.clone(),
            shift_index: s.span.index,
            shift_start: start,
            window,
            label: s.label,
            delirium,
        });
    }
    let statics = parse_statics(stay, catalog, &mut funnel);
    Ok((
        StayRecord {
            patient_id: stay.patient_id.clone(),
            stay_id: stay.encounter_id.clone(),
            los_minutes: los,
            statics,
        },
        shifts,
        funnel,
    ))
}

/// Labels, filters and windows every merged stay. Output is ordered by
/// (patient id, stay id, shift index).
pub fn extract_shifts(
    stays: &[RawEncounter],
    catalog: &Catalog,
    max_sequence_length: usize,
) -> Result<(Vec<StayRecord>, Vec<RawShift>, ShiftFunnel), EtlError> {
    let per_stay: Vec<_> = stays
        .par_iter()
        .map(|s| extract_stay(s, catalog, max_sequence_length))
        .collect::<Result<_, _>>()?;
    let mut records = Vec::with_capacity(per_stay.len());
    let mut shifts = Vec::new();
    let mut funnel = ShiftFunnel::default();
    for (rec, s, f) in per_stay {
        records.push(rec);
        shifts.extend(s);
        funnel.add(&f);
    }
    records.sort_by(|a, b| (&a.patient_id, &a.stay_id).cmp(&(&b.patient_id, &b.stay_id)));
    shifts.sort_by(|a, b| {
        (&a.patient_id, &a.stay_id, a.shift_index).cmp(&(&b.patient_id, &b.stay_id, b.shift_index))
    });
    Ok((records, shifts, funnel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shift(index: usize, start: Minutes, label: AcuityLabel) -> LabeledShift {
        LabeledShift {
            span: ShiftSpan {
                index,
                start,
                end: start + SHIFT_MINUTES,
            },
            label,
        }
    }

    #[test]
    fn short_stay_dropped() {
        let (kept, counts) = filter_shifts(600, vec![shift(0, 100, AcuityLabel::Normal)]);
        assert!(kept.is_empty());
        assert_eq!(counts.short_stay, 1);
    }

    #[test]
    fn early_and_boundary_shifts() {
        let (kept, counts) = filter_shifts(
            5000,
            vec![
                shift(0, 360, AcuityLabel::Normal),
                shift(1, 720, AcuityLabel::Coma),
                shift(2, 1440, AcuityLabel::Excluded),
            ],
        );
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].span.start, 720);
        assert_eq!(counts, FilterCounts { short_stay: 0, early_shift: 1, excluded: 1 });
    }

    #[test]
    fn clip_keeps_latest() {
        let w: Vec<usize> = (0..12500).collect();
        let c = clip_sequence(&w, 12000);
        assert_eq!(c.len(), 12000);
        assert_eq!(c[0], 500);
        assert_eq!(*c.last().unwrap(), 12499);
        assert_eq!(clip_sequence(&w[..100], 12000), w[..100].to_vec());
        assert_eq!(clip_sequence(&w, 1), vec![12499]);
    }

    proptest! {
        #[test]
        fn clip_is_idempotent(len in 0usize..200, max in 1usize..50) {
            let w: Vec<usize> = (0..len).collect();
            let once = clip_sequence(&w, max);
            prop_assert_eq!(clip_sequence(&once, max), once.clone());
            prop_assert!(once.len() <= max);
        }
    }
}
