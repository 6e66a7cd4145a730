use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::variables::{Layout, Role};
use super::{grid_spans, EncounterRow, EventRow, LabelRow, SynthConfig, SynthError};
use crate::etl::extract::MIN_OBSERVATION_MINUTES;
use crate::phenotype::{self, AcuityLabel, Cam, Minutes, ScoreValue, ShiftSpan, StayScores, TimedScore, SHIFT_MINUTES};
use crate::seeds;

/// Stay timing drawn before death probabilities are known.
#[derive(Debug, Clone)]
pub struct StaySkeleton {
    pub admit: NaiveDateTime,
    /// Minutes from admission to discharge (or death).
    pub los: Minutes,
    /// `(end of first encounter, gap)` for a stay charted as two encounters.
    pub split: Option<(Minutes, Minutes)>,
    pub retained_shifts: usize,
    /// The stay's final shift passes the observation filters.
    pub death_eligible: bool,
}

/// A stay as simulated, in minutes from its admission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedStay {
    pub patient_id: String,
    pub stay_id: String,
    pub encounters: Vec<usize>,
    pub discharge: Minutes,
    pub death: Option<Minutes>,
    pub spans: Vec<ShiftSpan>,
    pub states: Vec<AcuityLabel>,
}

pub struct PatientOutput {
    pub encounters: Vec<EncounterRow>,
    pub statics: Vec<(usize, String, String)>,
    pub events: Vec<EventRow>,
    pub labels: Vec<LabelRow>,
    pub states: Vec<(String, usize, AcuityLabel)>,
    pub stays: Vec<SimulatedStay>,
}

fn normal(rng: &mut ChaCha8Rng, mean: f64, sd: f64) -> f64 {
    Normal::new(mean, sd.max(0.0)).expect("finite parameters").sample(rng)
}

fn draw_los(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Minutes {
    if rng.random_bool(config.short_stay_fraction) {
        return rng.random_range(180..MIN_OBSERVATION_MINUTES);
    }
    let median = config.los_median_days * 1440.0;
    let d = LogNormal::new(median.ln(), config.los_sigma).expect("valid spread");
    (d.sample(rng).round() as Minutes).clamp(240, 90 * 1440)
}

fn retained_count(admit: NaiveDateTime, los: Minutes) -> (usize, bool) {
    if los < MIN_OBSERVATION_MINUTES {
        return (0, false);
    }
    let (spans, _) = grid_spans(admit, admit + Duration::minutes(los));
    let retained = spans.iter().filter(|s| s.start >= MIN_OBSERVATION_MINUTES).count();
    let last_ok = spans.last().is_some_and(|s| s.start >= MIN_OBSERVATION_MINUTES);
    (retained, last_ok)
}

fn stay_skeleton(config: &SynthConfig, admit: NaiveDateTime, rng: &mut ChaCha8Rng) -> StaySkeleton {
    let los = draw_los(config, rng);
    let split = (los > 2 * 1440 && rng.random_bool(config.split_encounter_fraction)).then(|| {
        let at = (los as f64 * rng.random_range(0.3..0.7)).round() as Minutes;
        (at, rng.random_range(30..300))
    });
    let (retained_shifts, death_eligible) = retained_count(admit, los);
    StaySkeleton {
        admit,
        los,
        split,
        retained_shifts,
        death_eligible,
    }
}

pub fn skeleton(config: &SynthConfig, patient: usize) -> Vec<StaySkeleton> {
    let mut rng = seeds::stream(config.seed, &[patient as u64, seeds::tag("skeleton")]);
    let epoch = NaiveDate::from_ymd_opt(2019, 1, 1).expect("valid date").and_hms_opt(0, 0, 0).expect("valid time");
    let admit = epoch + Duration::minutes(rng.random_range(0..4 * 365 * 1440));
    let first = stay_skeleton(config, admit, &mut rng);
    let mut stays = vec![first];
    if rng.random_bool(config.readmission_fraction) {
        let prev = &stays[0];
        let admit = prev.admit + Duration::minutes(prev.los + 120 + rng.random_range(3 * 1440..60 * 1440));
        let second = stay_skeleton(config, admit, &mut rng);
        stays.push(second);
    }
    stays
}

struct Patient {
    age: f64,
    sex: &'static str,
    bmi: Option<f64>,
    admission: &'static str,
    charlson: u64,
    /// Per-shift probabilities of delirium and coma.
    state_probs: [f64; 2],
    death_probability: f64,
    baselines: Vec<f64>,
}

fn draw_patient(
    config: &SynthConfig,
    layout: &Layout,
    rng: &mut ChaCha8Rng,
    death_probability: f64,
    state_probs: [f64; 2],
) -> Patient {
    let s = config.signal;
    let age = normal(rng, 62.0, 15.0).clamp(18.0, 95.0).round();
    let sex = if rng.random_bool(0.55) { "m" } else { "f" };
    let bmi = (!rng.random_bool(config.missing_static_fraction)).then(|| (normal(rng, 28.0, 5.5).clamp(14.0, 60.0) * 10.0).round() / 10.0);
    let u: f64 = rng.random();
    let admission = if u < 0.55 {
        "medical"
    } else if u < 0.85 {
        "surgical"
    } else {
        "trauma"
    };
    let charlson: f64 = Poisson::new(3.0).expect("positive rate").sample(rng);
    let charlson = charlson.min(15.0) as u64;

    let age_z = (age - 62.0) / 15.0;
    let charlson_z = (charlson as f64 - 3.0) / 3f64.sqrt();
    let (b_del, b_death) = (0.5 * s, 0.4 * s);
    let delirium = state_probs[0] * (b_del * age_z - b_del * b_del / 2.0).exp();
    let coma = state_probs[1] * if admission == "trauma" { 1.0 + s } else { 1.0 } / (1.0 + 0.15 * s);
    let total = delirium + coma;
    let scale = if total > 0.95 { 0.95 / total } else { 1.0 };
    let death_probability = (death_probability * (b_death * charlson_z - b_death * b_death / 2.0).exp()).clamp(0.0, 1.0);

    let baselines = layout
        .temporal
        .iter()
        .map(|v| v.measured().map_or(0.0, |m| normal(rng, m.mean, m.between)))
        .collect();
    Patient {
        age,
        sex,
        bmi,
        admission,
        charlson,
        state_probs: [delirium * scale, coma * scale],
        death_probability,
        baselines,
    }
}

fn draw_state(rng: &mut ChaCha8Rng, probs: [f64; 2]) -> AcuityLabel {
    let u: f64 = rng.random();
    if u < probs[0] {
        AcuityLabel::Delirium
    } else if u < probs[0] + probs[1] {
        AcuityLabel::Coma
    } else {
        AcuityLabel::Normal
    }
}

fn sorted_times(rng: &mut ChaCha8Rng, count: (usize, usize), lo: Minutes, hi: Minutes) -> Vec<Minutes> {
    let n = rng.random_range(count.0..=count.1);
    let mut t: Vec<Minutes> = (0..n).map(|_| rng.random_range(lo..=hi)).collect();
    t.sort_unstable();
    t
}

/// Scores charted during one shift, expressing `state`.
fn shift_scores(rng: &mut ChaCha8Rng, state: AcuityLabel, lo: Minutes, hi: Minutes) -> Vec<(Minutes, ScoreValue)> {
    let mut out = Vec::new();
    let borderline = state == AcuityLabel::Coma && rng.random_bool(0.25);
    for t in sorted_times(rng, (2, 3), lo, hi) {
        let r: i8 = match state {
            AcuityLabel::Coma if borderline => -3,
            AcuityLabel::Coma => rng.random_range(-5..=-4),
            AcuityLabel::Delirium => [-2, -1, 0, 1, 1, 2, 3][rng.random_range(0..7)],
            _ => [-2, -1, 0, 0, 0, 1][rng.random_range(0..6)],
        };
        out.push((t, ScoreValue::Rass(r)));
    }
    for t in sorted_times(rng, (1, 2), lo, hi) {
        let cam = if state == AcuityLabel::Delirium { Cam::Positive } else { Cam::Negative };
        out.push((t, ScoreValue::Cam(cam)));
    }
    for t in sorted_times(rng, (1, 2), lo, hi) {
        let g: u8 = match state {
            AcuityLabel::Coma => rng.random_range(3..=8),
            AcuityLabel::Delirium => rng.random_range(9..=15),
            _ => rng.random_range(13..=15),
        };
        out.push((t, ScoreValue::Gcs(g)));
    }
    out
}

/// State whose window contains minute `t`, with the position in the window
/// in (0, 1].
fn upcoming(spans: &[ShiftSpan], outlook: &[AcuityLabel], t: Minutes) -> Option<(AcuityLabel, f64)> {
    let k = spans.partition_point(|s| s.start < t);
    let span = spans.get(k)?;
    let r = 1.0 - (span.start - t) as f64 / SHIFT_MINUTES as f64;
    Some((outlook[k], r.clamp(0.0, 1.0)))
}

fn effect(role: Role, state: AcuityLabel, r: f64, s: f64, rng: &mut ChaCha8Rng) -> f64 {
    match (state, role) {
        (AcuityLabel::Coma, Role::HeartRate) => -22.0 * r * s,
        (AcuityLabel::Coma, Role::Systolic) => -12.0 * r * s,
        (AcuityLabel::Coma, Role::RespRate) => -6.0 * r * s,
        (AcuityLabel::Coma, Role::Spo2) => -1.0 * r * s,
        (AcuityLabel::Delirium, Role::HeartRate) if rng.random_bool(0.5 * s) => {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.random_range(25.0..40.0)
        }
        (AcuityLabel::Delirium, Role::RespRate) if rng.random_bool(0.5 * s) => {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.random_range(6.0..10.0)
        }
        (AcuityLabel::Delirium, Role::Temperature) => 0.35 * s,
        (AcuityLabel::Dead, Role::Systolic) => -30.0 * r * s,
        (AcuityLabel::Dead, Role::Diastolic) => -15.0 * r * s,
        (AcuityLabel::Dead, Role::HeartRate) => 22.0 * r * s,
        (AcuityLabel::Dead, Role::Spo2) => -6.0 * r * s,
        (AcuityLabel::Dead, Role::RespRate) => 6.0 * r * s,
        (AcuityLabel::Dead, Role::Lactate) => 4.0 * r * s,
        (AcuityLabel::Dead, Role::Creatinine) => 0.8 * r * s,
        _ => 0.0,
    }
}

fn format_value(v: f64, decimals: usize) -> String {
    let s = format!("{v:.decimals$}");
    if s.starts_with('-') && s.trim_start_matches(['-', '0', '.']).is_empty() {
        s[1..].to_string()
    } else {
        s
    }
}

/// Doses of one medication in one window: `(minutes before the shift
/// start, dose)`.
fn medication_course(role: Role, state: AcuityLabel, s: f64, rng: &mut ChaCha8Rng) -> Vec<(Minutes, f64)> {
    let (p, doses) = match role {
        Role::Propofol => (0.08 + if state == AcuityLabel::Coma { 0.75 * s } else { 0.0 }, 3),
        Role::Haloperidol => (0.04 + if state == AcuityLabel::Delirium { 0.45 * s } else { 0.0 }, 2),
        Role::Norepinephrine => (0.05 + if state == AcuityLabel::Dead { 0.6 * s } else { 0.0 }, 3),
        Role::Fentanyl => (0.2, 2),
        Role::Filler(_) => (0.1, 1),
        _ => return Vec::new(),
    };
    if !rng.random_bool(p.min(1.0)) {
        return Vec::new();
    }
    let signaled = matches!(
        (role, state),
        (Role::Propofol, AcuityLabel::Coma) | (Role::Haloperidol, AcuityLabel::Delirium) | (Role::Norepinephrine, AcuityLabel::Dead)
    );
    (0..doses)
        .map(|j| {
            let before = 360 - j as Minutes * 120 - rng.random_range(0..60);
            let r = 1.0 - before as f64 / SHIFT_MINUTES as f64;
            let dose = match role {
                Role::Propofol => normal(rng, 15.0, 4.0).max(2.0) + if signaled { 25.0 * r * s } else { 0.0 },
                Role::Haloperidol => rng.random_range(0.5..2.0) + if signaled { 3.0 * s } else { 0.0 },
                Role::Norepinephrine => rng.random_range(2.0..8.0) + if signaled { 20.0 * r * s } else { 0.0 },
                Role::Fentanyl => rng.random_range(25.0..100.0),
                _ => rng.random_range(1.0..10.0),
            };
            (before.max(1), dose)
        })
        .collect()
}

struct StayEvents {
    /// `(minute, code, value)`.
    events: Vec<(Minutes, usize, String)>,
    scores: Vec<TimedScore>,
}

#[allow(clippy::too_many_arguments)]
fn simulate_stay(
    config: &SynthConfig,
    layout: &Layout,
    patient: &Patient,
    sk: &StaySkeleton,
    rng: &mut ChaCha8Rng,
) -> (StayEvents, Vec<ShiftSpan>, Vec<AcuityLabel>, Option<Minutes>, Minutes) {
    let s = config.signal;
    let death = (sk.death_eligible && rng.random_bool(patient.death_probability)).then_some(sk.los);
    let discharge = sk.los + if death.is_some() { rng.random_range(0..=120) } else { 0 };
    let (spans, _) = grid_spans(sk.admit, sk.admit + Duration::minutes(discharge));
    let states: Vec<AcuityLabel> = spans.iter().map(|_| draw_state(rng, patient.state_probs)).collect();
    let death_shift = death.map(|d| spans.iter().rposition(|sp| sp.start <= d).unwrap_or(0));
    let outlook: Vec<AcuityLabel> = states
        .iter()
        .enumerate()
        .map(|(k, &z)| if Some(k) == death_shift { AcuityLabel::Dead } else { z })
        .collect();
    let last_time = death.unwrap_or(discharge);

    let unscored = if spans.len() > 3 && rng.random_bool(config.unscored_gap_fraction) {
        let limit = death_shift.unwrap_or(spans.len()).saturating_sub(2).max(1);
        let k = rng.random_range(1..=limit);
        Some(k)
    } else {
        None
    };

    let codes = [
        layout.code(Role::Rass).expect("score variable"),
        layout.code(Role::Cam).expect("score variable"),
        layout.code(Role::Gcs).expect("score variable"),
    ];
    let mut events: Vec<(Minutes, usize, String)> = Vec::new();
    let mut scores = Vec::new();
    for (k, span) in spans.iter().enumerate() {
        if unscored.is_some_and(|u| k == u || k == u + 1) {
            continue;
        }
        if death_shift.is_some_and(|d| k > d) {
            break;
        }
        let lo = span.start + 30;
        let hi = span.end.min(last_time) - 10;
        if hi < lo + 20 {
            continue;
        }
        for (t, v) in shift_scores(rng, states[k], lo, hi) {
            let (code, text) = match v {
                ScoreValue::Rass(r) => (codes[0], r.to_string()),
                ScoreValue::Cam(Cam::Positive) => (codes[1], "positive".to_string()),
                ScoreValue::Cam(Cam::Negative) => (codes[1], "negative".to_string()),
                ScoreValue::Gcs(g) => (codes[2], g.to_string()),
            };
            events.push((t, code, text));
            scores.push(TimedScore::new(t, v).expect("non-negative time"));
        }
    }

    for (code, var) in layout.temporal.iter().enumerate() {
        let Some(m) = var.measured() else { continue };
        let rate = config.vital_rate_per_hour * m.rate / 60.0;
        let gap = rand_distr::Exp::new(rate).expect("positive rate");
        let mut t = gap.sample(rng);
        let mut drift = normal(rng, 0.0, m.drift);
        let mut last = 0.0;
        while (t.round() as Minutes) <= last_time {
            let minute = t.round() as Minutes;
            let rho = (-(t - last) / 480.0).exp();
            drift = drift * rho + (1.0 - rho * rho).sqrt() * normal(rng, 0.0, m.drift);
            last = t;
            let mut v = patient.baselines[code] + drift + normal(rng, 0.0, m.noise);
            if let Some((state, r)) = upcoming(&spans, &outlook, minute) {
                v += effect(var.role, state, r, s, rng);
            }
            events.push((minute, code, format_value(v.clamp(m.min, m.max), m.decimals)));
            t += gap.sample(rng);
        }
    }

    for (code, var) in layout.temporal.iter().enumerate() {
        if var.role == Role::Physostigmine {
            if rng.random_bool(0.01) && last_time > 0 {
                events.push((rng.random_range(0..=last_time), code, format_value(rng.random_range(0.5..2.0), 2)));
            }
            continue;
        }
        for (k, span) in spans.iter().enumerate() {
            if death_shift.is_some_and(|d| k > d) {
                break;
            }
            for (before, dose) in medication_course(var.role, outlook[k], s, rng) {
                let t = span.start - before;
                if (0..=last_time).contains(&t) {
                    events.push((t, code, format_value(dose, 1)));
                }
            }
        }
    }
    events.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    let states = outlook;
    (StayEvents { events, scores }, spans, states, death, discharge)
}

#[allow(clippy::too_many_arguments)]
pub fn simulate_patient(
    config: &SynthConfig,
    layout: &Layout,
    index: usize,
    skeletons: Vec<StaySkeleton>,
    death_probability: f64,
    state_probs: [f64; 2],
    rng: &mut ChaCha8Rng,
) -> Result<PatientOutput, SynthError> {
    let patient_id = format!("P{:05}", index + 1);
    let patient = draw_patient(config, layout, rng, death_probability, state_probs);
    let mut out = PatientOutput {
        encounters: Vec::new(),
        statics: Vec::new(),
        events: Vec::new(),
        labels: Vec::new(),
        states: Vec::new(),
        stays: Vec::new(),
    };
    let mut statics = vec![
        ("age".to_string(), format!("{}", patient.age)),
        ("sex".to_string(), patient.sex.to_string()),
        ("admission_type".to_string(), patient.admission.to_string()),
        ("charlson_index".to_string(), patient.charlson.to_string()),
    ];
    statics.push(("bmi".to_string(), patient.bmi.map(|b| format_value(b, 1)).unwrap_or_default()));

    let mut encounter_number = 0;
    for sk in &skeletons {
        let (mut stay_events, spans, states, death, discharge) = simulate_stay(config, layout, &patient, sk, rng);
        let in_gap = |t: Minutes| sk.split.is_some_and(|(at, gap)| t > at && t < at + gap);
        stay_events.events.retain(|e| !in_gap(e.0));
        stay_events.scores.retain(|sc| !in_gap(sc.time));

        let mut parts = vec![(0, discharge)];
        if let Some((at, gap)) = sk.split {
            if at + gap < discharge {
                parts = vec![(0, at), (at + gap, discharge)];
            }
        }
        let first = out.encounters.len();
        let mut ids = Vec::new();
        for (i, &(from, to)) in parts.iter().enumerate() {
            encounter_number += 1;
            let encounter_id = format!("{patient_id}-E{encounter_number}");
            let last = i + 1 == parts.len();
            out.encounters.push(EncounterRow {
                patient_id: patient_id.clone(),
                encounter_id: encounter_id.clone(),
                admit: sk.admit + Duration::minutes(from),
                discharge: sk.admit + Duration::minutes(to),
                death: death.filter(|_| last).map(|d| sk.admit + Duration::minutes(d)),
            });
            for (name, value) in &statics {
                out.statics.push((first + i, name.clone(), value.clone()));
            }
            ids.push(encounter_id);
        }
        let split_at = sk.split.map(|(at, _)| at);
        for (t, code, value) in stay_events.events {
            let part = usize::from(parts.len() == 2 && split_at.is_some_and(|at| t > at));
            out.events.push(EventRow {
                encounter: first + part,
                time: sk.admit + Duration::minutes(t),
                code,
                value,
            });
        }

        let stay_id = ids[0].clone();
        let stream = StayScores::from_mixed(&stay_events.scores, death);
        for (index, label) in phenotype::label_stay(&stream, &spans)? {
            let span = spans[index];
            out.labels.push(LabelRow {
                patient_id: patient_id.clone(),
                stay_id: stay_id.clone(),
                shift_index: index,
                shift_start: sk.admit + Duration::minutes(span.start),
                label,
                retained: discharge >= MIN_OBSERVATION_MINUTES && span.start >= MIN_OBSERVATION_MINUTES,
            });
        }
        for (k, &z) in states.iter().enumerate() {
            out.states.push((stay_id.clone(), k, z));
        }
        out.stays.push(SimulatedStay {
            patient_id: patient_id.clone(),
            stay_id,
            encounters: (first..out.encounters.len()).collect(),
            discharge,
            death,
            spans,
            states,
        });
    }
    Ok(out)
}
