//! Run configuration: built-in defaults, overlaid by a preset, the TOML file
//! given with `--config`, and finally command-line flags.

use std::path::Path;

use acuity::etl::PrepareConfig;
use acuity::evaluation::EvaluationConfig;
use acuity::model::logistic::LogisticConfig;
use acuity::model::{ModelConfig, TrainConfig};
use acuity::synthgen::SynthConfig;
use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed of every stage.
    pub seed: u64,
    pub synth: SynthConfig,
    pub prepare: PrepareConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub evaluate: EvaluationConfig,
    pub logistic: LogisticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            synth: SynthConfig::default(),
            prepare: PrepareConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            evaluate: EvaluationConfig::default(),
            logistic: LogisticConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Parses `text` over `base`; unknown keys are errors.
    pub fn overlay(base: &RunConfig, text: &str) -> Result<RunConfig> {
        let over: toml::Value = toml::from_str(text).context("malformed configuration")?;
        let mut merged = toml::Value::try_from(base).context("configuration does not serialize")?;
        merge(&mut merged, over);
        let config: RunConfig = merged.try_into().context("invalid configuration")?;
        Ok(config)
    }

    /// Defaults, then the synthetic-cohort preset, then the file.
    pub fn load(path: Option<&Path>, preset: Option<&str>) -> Result<RunConfig> {
        let mut base = RunConfig::default();
        if let Some(name) = preset {
            base.synth = SynthConfig::preset(name)?;
        }
        match path {
            None => Ok(base),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| anyhow!("{}: {e}", p.display()))?;
                RunConfig::overlay(&base, &text).with_context(|| p.display().to_string())
            }
        }
    }

    /// Gives every stage the same root seed.
    pub fn with_seed(mut self, seed: Option<u64>) -> RunConfig {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.synth.seed = self.seed;
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.evaluate.seed = self.seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn file_values_override_defaults() {
        let c = RunConfig::overlay(&RunConfig::default(), "seed = 4\n[synth]\npatients = 12\n[train]\nmax_epochs = 2\n").unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.synth.patients, 12);
        assert_eq!(c.synth.signal, 1.0);
        assert_eq!(c.train.max_epochs, 2);
        assert_eq!(c.train.batch_size, 64);
    }

    #[test]
    fn unknown_and_malformed_keys_are_rejected() {
        assert!(RunConfig::overlay(&RunConfig::default(), "[synth]\npatient = 3\n").is_err());
        assert!(RunConfig::overlay(&RunConfig::default(), "[synth\n").is_err());
        assert!(RunConfig::overlay(&RunConfig::default(), "[synth]\npatients = \"many\"\n").is_err());
    }

    #[test]
    fn nested_tables_merge() {
        let c = RunConfig::overlay(&RunConfig::default(), "[synth.prevalence]\ndelirium = 0.1\n[evaluate.bootstrap]\niterations = 3\n").unwrap();
        assert_eq!(c.synth.prevalence.delirium, 0.1);
        assert_eq!(c.synth.prevalence.coma, 0.09);
        assert_eq!(c.evaluate.bootstrap.iterations, 3);
    }

    #[test]
    fn preset_sits_below_the_file() {
        let base = RunConfig::load(None, Some("delirium")).unwrap();
        assert_eq!(base.synth.prevalence.delirium, 0.08);
        let c = RunConfig::overlay(&base, "[synth.prevalence]\ncoma = 0.05\n").unwrap();
        assert_eq!(c.synth.prevalence.delirium, 0.08);
        assert_eq!(c.synth.prevalence.coma, 0.05);
    }

    #[test]
    fn documented_example_parses() {
        let text = "seed = 7\n[synth]\npatients = 500\nsignal = 0.8\n[synth.prevalence]\ndelirium = 0.06\ncoma = 0.09\nmortality = 0.03\n\
            [model]\nd = 32\nlayers = 2\nheads = 4\nattention = { type = \"sliding_window_global\", window = 16, global = 1 }\npositions = true\n\
            [train]\nmax_epochs = 30\nbatch_size = 64\nlearning_rate = 0.001\nmax_samples_per_epoch = 4096\nmax_validation_samples = 2048\n\
            [evaluate.bootstrap]\niterations = 10\n";
        let c = RunConfig::overlay(&RunConfig::default(), text).unwrap();
        assert_eq!(c.model.attention, acuity::model::AttentionKind::SlidingWindowGlobal { window: 16, global: 1 });
        assert_eq!(c.train.max_validation_samples, Some(2048));
        assert_eq!(c.synth.patients, 500);
    }

    #[test]
    fn root_seed_reaches_every_stage() {
        let c = RunConfig::default().with_seed(Some(9));
        assert_eq!((c.synth.seed, c.model.seed, c.train.seed, c.evaluate.seed), (9, 9, 9, 9));
    }

    proptest! {
        #[test]
        fn serialized_configs_read_back(seed in 0..=i64::MAX as u64, patients in 1usize..5000, signal in 0.0f64..=1.0, epochs in 1usize..50) {
            let mut c = RunConfig::default().with_seed(Some(seed));
            c.synth.patients = patients;
            c.synth.signal = signal;
            c.train.max_epochs = epochs;
            let text = toml::to_string(&c).unwrap();
            prop_assert_eq!(RunConfig::overlay(&RunConfig::default(), &text).unwrap(), c);
        }
    }
}
