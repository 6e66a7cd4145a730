use std::collections::BTreeSet;
use std::path::Path;

use acuity::etl::split::Assignment;
use acuity::etl::{prepare, read_bundle, write_bundle, Bundle, PrepareConfig};
use acuity::evaluation::{run_cv, EvaluationConfig, ReportMeta};
use acuity::model::{load_checkpoint, predict_batch, save_checkpoint, HeadKind, ModelConfig, ModelError, TrainConfig};
use acuity::pipeline::{train_folds, PipelineError, ReferenceKind, ReferenceScorer, TransformerScorer};
use acuity::synthgen::{default_catalog, generate, write_cohort, SynthConfig};
use proptest::prelude::*;

fn cohort(dir: &Path, config: &SynthConfig) -> Bundle {
    let synth = generate(config).unwrap();
    write_cohort(&synth, config, dir).unwrap();
    prepare(dir, default_catalog(config), &PrepareConfig::default(), config.seed).unwrap()
}

fn tiny() -> (ModelConfig, TrainConfig) {
    let mc = ModelConfig {
        d: 8,
        layers: 1,
        heads: 2,
        ffn_hidden: 8,
        static_hidden: 4,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        max_epochs: 1,
        max_samples_per_epoch: Some(64),
        ..TrainConfig::default()
    };
    (mc, tc)
}

#[test]
fn checkpoint_round_trip_reproduces_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let config = SynthConfig {
        patients: 60,
        seed: 3,
        ..SynthConfig::default()
    };
    let bundle = cohort(tmp.path(), &config);
    let (mc, tc) = tiny();
    let checkpoint = train_folds(&bundle, &[0, 1], &mc, &tc, 3).unwrap();
    let path = tmp.path().join("checkpoint.json");
    save_checkpoint(&path, &checkpoint).unwrap();
    let loaded = load_checkpoint(&path, Some(&bundle.manifest.catalog_hash)).unwrap();
    assert_eq!(loaded, checkpoint);

    let cohort = bundle.cohort();
    let test = bundle.split.test();
    for fold in &checkpoint.folds {
        let back = loaded.fold(fold.fold).unwrap();
        let records = fold.preprocessor.transform(&cohort, &test).unwrap();
        let a = predict_batch(&fold.model(&checkpoint.config).unwrap(), &records).unwrap();
        let b = predict_batch(&back.model(&loaded.config).unwrap(), &records).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (p, q) in x.probabilities.iter().zip(&y.probabilities) {
                assert!((p - q).abs() <= 1e-12);
            }
        }
    }
    assert!(matches!(loaded.fold(4), Err(ModelError::Checkpoint(_))));
}

#[test]
fn checkpoint_refuses_another_catalog() {
    let tmp = tempfile::tempdir().unwrap();
    let config = SynthConfig {
        patients: 40,
        seed: 4,
        ..SynthConfig::default()
    };
    let bundle = cohort(&tmp.path().join("a"), &config);
    let (mc, tc) = tiny();
    let checkpoint = train_folds(&bundle, &[0], &mc, &tc, 4).unwrap();
    let path = tmp.path().join("checkpoint.json");
    save_checkpoint(&path, &checkpoint).unwrap();

    let wider = SynthConfig { labs: 7, ..config };
    let other = cohort(&tmp.path().join("b"), &wider);
    assert_ne!(other.manifest.catalog_hash, bundle.manifest.catalog_hash);
    assert!(load_checkpoint(&path, Some(&other.manifest.catalog_hash)).is_err());
    let scorer = TransformerScorer {
        bundle: &other,
        checkpoint: &checkpoint,
    };
    let meta = ReportMeta {
        task: HeadKind::FourClass,
        model: "transformer".into(),
        config_hash: String::new(),
    };
    assert!(run_cv(&scorer, 1, &meta, &EvaluationConfig::default()).is_err());
}

#[test]
fn bundle_survives_write_and_read() {
    let tmp = tempfile::tempdir().unwrap();
    let config = SynthConfig {
        patients: 30,
        seed: 5,
        ..SynthConfig::default()
    };
    let bundle = cohort(&tmp.path().join("raw"), &config);
    let out = tmp.path().join("bundle");
    write_bundle(&bundle, &out).unwrap();
    let back = read_bundle(&out).unwrap();
    assert_eq!(back.shifts, bundle.shifts);
    assert_eq!(back.split, bundle.split);
    assert_eq!(back.stays, bundle.stays);
    assert_eq!(back.manifest.funnel, bundle.manifest.funnel);

    std::fs::write(out.join("shifts.csv"), "tampered\n").unwrap();
    assert!(read_bundle(&out).is_err());
}

#[test]
fn oracle_scores_are_perfect_across_folds() {
    let tmp = tempfile::tempdir().unwrap();
    let config = SynthConfig {
        patients: 120,
        seed: 6,
        ..SynthConfig::default()
    };
    let bundle = cohort(tmp.path(), &config);
    let scorer = ReferenceScorer {
        bundle: &bundle,
        head: HeadKind::FourClass,
        kind: ReferenceKind::Oracle,
    };
    let meta = ReportMeta {
        task: HeadKind::FourClass,
        model: "oracle".into(),
        config_hash: String::new(),
    };
    let report: Result<_, PipelineError> = run_cv(&scorer, 5, &meta, &EvaluationConfig::default());
    let report = report.unwrap();
    assert_eq!(report.mean_auroc(), Some(1.0));
    assert_eq!(report.folds.len(), 5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn prepared_cohorts_keep_their_invariants(
        seed in any::<u64>(),
        patients in 8usize..40,
        short in 0.0f64..0.4,
        split in 0.0f64..0.5,
        gap in 0.0f64..0.2,
    ) {
        let tmp = tempfile::tempdir().unwrap();
        let config = SynthConfig {
            patients,
            seed,
            short_stay_fraction: short,
            split_encounter_fraction: split,
            unscored_gap_fraction: gap,
            ..SynthConfig::default()
        };
        let bundle = cohort(tmp.path(), &config);
        let funnel = bundle.manifest.funnel;
        prop_assert!(funnel.is_balanced());
        prop_assert_eq!(funnel.retained, bundle.shifts.len());
        prop_assert!(bundle.shifts.iter().all(|s| s.shift_start >= 720));
        let split = &bundle.split;
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        for a in (0..split.fold_count).map(Assignment::Fold).chain([Assignment::Test]) {
            for p in split.patients_in(a) {
                prop_assert!(seen.insert(p));
            }
        }
        for (i, s) in bundle.shifts.iter().enumerate() {
            prop_assert_eq!(split.patients.get(&s.patient_id), Some(&split.shifts[i]));
        }
    }
}
