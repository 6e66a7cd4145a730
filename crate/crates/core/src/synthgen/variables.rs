use crate::etl::{Catalog, StaticKind, StaticSpec, VariableKind, VariableSpec};

use super::SynthConfig;

pub const MIN_VITALS: usize = 6;
pub const MIN_LABS: usize = 1;
pub const MIN_MEDICATIONS: usize = 4;

/// What a temporal variable does in the simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    HeartRate,
    Systolic,
    Diastolic,
    RespRate,
    Spo2,
    Temperature,
    Lactate,
    Sodium,
    Creatinine,
    Wbc,
    Glucose,
    Propofol,
    Haloperidol,
    Norepinephrine,
    Fentanyl,
    Physostigmine,
    /// Noise-only filler added by the vocabulary-size knobs.
    Filler(VariableKind),
    Rass,
    Cam,
    Gcs,
}

/// Measurement model of a continuous variable.
#[derive(Debug, Clone, Copy)]
pub struct Measured {
    pub mean: f64,
    /// Between-patient spread of the personal baseline.
    pub between: f64,
    /// Slow within-stay drift.
    pub drift: f64,
    pub noise: f64,
    pub min: f64,
    pub max: f64,
    pub decimals: usize,
    /// Relative to the configured vital rate.
    pub rate: f64,
}

#[derive(Debug, Clone)]
pub struct Variable {
    pub name: String,
    pub unit: String,
    pub kind: VariableKind,
    pub role: Role,
}

impl Variable {
    fn new(name: &str, unit: &str, kind: VariableKind, role: Role) -> Self {
        Variable {
            name: name.into(),
            unit: unit.into(),
            kind,
            role,
        }
    }

    pub fn measured(&self) -> Option<Measured> {
        let m = |mean, between, drift, noise, min, max, decimals, rate| Measured {
            mean,
            between,
            drift,
            noise,
            min,
            max,
            decimals,
            rate,
        };
        Some(match self.role {
            Role::HeartRate => m(82.0, 7.0, 4.0, 3.0, 25.0, 220.0, 0, 1.0),
            Role::Systolic => m(122.0, 9.0, 5.0, 4.0, 40.0, 240.0, 0, 1.0),
            Role::Diastolic => m(68.0, 6.0, 3.0, 3.0, 20.0, 150.0, 0, 1.0),
            Role::RespRate => m(18.0, 2.0, 1.2, 1.0, 4.0, 60.0, 0, 1.0),
            Role::Spo2 => m(96.5, 1.0, 0.8, 0.6, 50.0, 100.0, 0, 0.5),
            Role::Temperature => m(37.0, 0.2, 0.15, 0.1, 33.0, 42.0, 1, 0.5),
            Role::Lactate => m(1.4, 0.3, 0.2, 0.2, 0.2, 20.0, 1, 0.12),
            Role::Sodium => m(139.0, 2.5, 1.0, 1.0, 110.0, 170.0, 0, 0.12),
            Role::Creatinine => m(1.1, 0.3, 0.1, 0.08, 0.1, 15.0, 2, 0.12),
            Role::Wbc => m(9.5, 2.5, 1.0, 0.8, 0.1, 80.0, 1, 0.12),
            Role::Glucose => m(135.0, 18.0, 10.0, 12.0, 30.0, 600.0, 0, 0.12),
            Role::Filler(VariableKind::Vital) => m(50.0, 5.0, 2.0, 2.0, 0.0, 200.0, 1, 0.5),
            Role::Filler(_) => m(10.0, 2.0, 1.0, 1.0, 0.0, 100.0, 2, 0.1),
            _ => return None,
        })
    }
}

/// The simulated variables in catalog order, and the static variables.
#[derive(Debug, Clone)]
pub struct Layout {
    pub temporal: Vec<Variable>,
    pub statics: Vec<StaticSpec>,
}

impl Layout {
    pub fn new(config: &SynthConfig) -> Self {
        use VariableKind::*;
        let vitals = [
            Variable::new("heart_rate", "bpm", Vital, Role::HeartRate),
            Variable::new("sbp", "mmHg", Vital, Role::Systolic),
            Variable::new("dbp", "mmHg", Vital, Role::Diastolic),
            Variable::new("resp_rate", "/min", Vital, Role::RespRate),
            Variable::new("spo2", "%", Vital, Role::Spo2),
            Variable::new("temperature", "C", Vital, Role::Temperature),
        ];
        let labs = [
            Variable::new("lactate", "mmol/L", Lab, Role::Lactate),
            Variable::new("sodium", "mmol/L", Lab, Role::Sodium),
            Variable::new("creatinine", "mg/dL", Lab, Role::Creatinine),
            Variable::new("wbc", "10^3/uL", Lab, Role::Wbc),
            Variable::new("glucose", "mg/dL", Lab, Role::Glucose),
        ];
        let meds = [
            Variable::new("propofol", "mcg/kg/min", Medication, Role::Propofol),
            Variable::new("haloperidol", "mg", Medication, Role::Haloperidol),
            Variable::new("norepinephrine", "mcg/min", Medication, Role::Norepinephrine),
            Variable::new("fentanyl", "mcg/h", Medication, Role::Fentanyl),
            Variable::new("physostigmine", "mg", Medication, Role::Physostigmine),
        ];
        let mut temporal = Vec::new();
        let mut take = |known: &[Variable], n: usize, kind: VariableKind, prefix: &str| {
            for i in 0..n {
                temporal.push(match known.get(i) {
                    Some(v) => v.clone(),
                    None => Variable::new(&format!("{prefix}_{}", i + 1), "unit", kind, Role::Filler(kind)),
                });
            }
        };
        take(&vitals, config.vitals, Vital, "vital");
        take(&labs, config.labs, Lab, "lab");
        take(&meds, config.medications, Medication, "medication");
        temporal.push(Variable::new("rass", "score", Score, Role::Rass));
        temporal.push(Variable::new("cam", "score", Score, Role::Cam));
        temporal.push(Variable::new("gcs", "score", Score, Role::Gcs));
        let statics = [
            ("age", StaticKind::Numeric),
            ("sex", StaticKind::Categorical),
            ("bmi", StaticKind::Numeric),
            ("admission_type", StaticKind::Categorical),
            ("charlson_index", StaticKind::Numeric),
        ]
        .into_iter()
        .map(|(name, kind)| StaticSpec { name: name.into(), kind })
        .collect();
        Layout { temporal, statics }
    }

    pub fn code(&self, role: Role) -> Option<usize> {
        self.temporal.iter().position(|v| v.role == role)
    }
}

/// Catalog of the variables a cohort generated with `config` contains.
pub fn default_catalog(config: &SynthConfig) -> Catalog {
    let layout = Layout::new(config);
    Catalog::new(
        layout
            .temporal
            .iter()
            .map(|v| VariableSpec {
                name: v.name.clone(),
                kind: v.kind,
                unit: v.unit.clone(),
            })
            .collect(),
        layout.statics,
    )
    .expect("generated catalog is valid")
}
