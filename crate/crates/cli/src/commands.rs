use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use acuity::etl::bundle::{read_bundle, write_atomic, write_bundle};
use acuity::etl::{prepare, Bundle, Catalog, EtlError};
use acuity::evaluation::{curves_csv, summarize_folds, EvaluationConfig, FoldPredictions, FoldScorer, MetricsReport, ReportMeta};
use acuity::model::checkpoint::CHECKPOINT_FORMAT_VERSION;
use acuity::model::{load_checkpoint, save_checkpoint, Checkpoint, HeadKind, ModelError, TrainingLog};
use acuity::phenotype::{label_stay, AcuityLabel, ScoreKind, ScoreValue, ShiftSpan, StayScores, TimedScore, SHIFT_MINUTES};
use acuity::pipeline::{config_hash, train_fold, LogisticScorer, PipelineError, ReferenceKind, ReferenceScorer, TransformerScorer};
use acuity::synthgen::{generate, write_cohort, SynthError, SynthManifest};
use anyhow::{anyhow, Context};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::{RunManifest, Timer};
use crate::{Baseline, Failure, Head};

type Outcome = Result<(), Failure>;

fn synth_failure(e: SynthError) -> Failure {
    match e {
        SynthError::Config(_) | SynthError::Infeasible(_) => Failure::Config(e.into()),
        other => Failure::Runtime(other.into()),
    }
}

fn etl_failure(e: EtlError) -> Failure {
    match e {
        EtlError::Config(_) | EtlError::Catalog(_) | EtlError::MissingInput(_) => Failure::Config(e.into()),
        other => Failure::Runtime(other.into()),
    }
}

fn model_failure(e: ModelError) -> Failure {
    match e {
        ModelError::Config(_) => Failure::Config(e.into()),
        other => Failure::Runtime(other.into()),
    }
}

fn pipeline_failure(e: PipelineError) -> Failure {
    match e {
        PipelineError::Etl(e) => etl_failure(e),
        PipelineError::Model(e) => model_failure(e),
        PipelineError::Config(_) => Failure::Config(e.into()),
        PipelineError::Metric(_) => Failure::Runtime(e.into()),
    }
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn create_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).with_context(|| dir.display().to_string()).map_err(runtime)
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Outcome {
    write_atomic(&dir.join(name), bytes).map_err(runtime)
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable");
    v.push(b'\n');
    v
}

pub struct SynthArgs {
    pub out: PathBuf,
    pub patients: Option<usize>,
    pub signal: Option<f64>,
}

pub fn synth(config: &RunConfig, args: &SynthArgs) -> Outcome {
    let mut sc = config.synth.clone();
    if let Some(n) = args.patients {
        sc.patients = n;
    }
    if let Some(s) = args.signal {
        sc.signal = s;
    }
    let mut timer = Timer::new();
    let cohort = generate(&sc).map_err(synth_failure)?;
    timer.lap("generate");
    let written = write_cohort(&cohort, &sc, &args.out).map_err(synth_failure)?;
    timer.lap("write");
    let mut run = RunManifest::new("synth", config_hash(&sc), sc.seed);
    run.outputs = written.files;
    run.output(&args.out, "manifest.json").map_err(runtime)?;
    run.timings = timer.timings;
    run.write(&args.out).map_err(runtime)
}

pub struct PrepareArgs {
    pub raw: PathBuf,
    pub out: PathBuf,
    pub catalog: Option<PathBuf>,
    pub tabular: bool,
}

const RAW_FILES: [&str; 3] = ["encounters.csv", "static.csv", "events.csv"];

/// The catalog file given on the command line, else the one a synthetic
/// cohort records in its manifest.
fn resolve_catalog(args: &PrepareArgs) -> Result<(Catalog, Option<SynthManifest>), Failure> {
    let manifest_path = args.raw.join("manifest.json");
    let synth: Option<SynthManifest> = if manifest_path.exists() {
        let bytes = std::fs::read(&manifest_path).with_context(|| manifest_path.display().to_string()).map_err(runtime)?;
        Some(serde_json::from_slice(&bytes).with_context(|| manifest_path.display().to_string()).map_err(runtime)?)
    } else {
        None
    };
    let catalog = match (&args.catalog, &synth) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(anyhow!("{}: {e}", path.display())))?;
            let c: Catalog = serde_json::from_str(&text).map_err(|e| Failure::Config(anyhow!("{}: {e}", path.display())))?;
            Catalog::new(c.temporal, c.static_vars).map_err(etl_failure)?
        }
        (None, Some(m)) => m.catalog.clone(),
        (None, None) => {
            return Err(Failure::Config(anyhow!(
                "no variable catalog: pass --catalog or use a directory written by `synth`"
            )))
        }
    };
    Ok((catalog, synth))
}

pub fn prepare_cmd(config: &RunConfig, args: &PrepareArgs) -> Outcome {
    for name in RAW_FILES {
        let path = args.raw.join(name);
        if !path.exists() {
            return Err(etl_failure(EtlError::MissingInput(path.display().to_string())));
        }
    }
    let (catalog, synth) = resolve_catalog(args)?;
    let mut pc = config.prepare.clone();
    pc.tabular |= args.tabular;
    pc.validate().map_err(etl_failure)?;
    if let Some(m) = &synth {
        for (name, digest) in &m.files {
            let path = args.raw.join(name);
            if path.exists() && &acuity::etl::bundle::sha256_file(&path).map_err(runtime)? != digest {
                return Err(runtime(anyhow!("{} does not match its manifest digest", path.display())));
            }
        }
    }

    let mut timer = Timer::new();
    let bundle = prepare(&args.raw, catalog, &pc, config.seed).map_err(etl_failure)?;
    timer.lap("prepare");
    create_dir(&args.out)?;
    let written = write_bundle(&bundle, &args.out).map_err(etl_failure)?;
    timer.lap("write");
    let mut run = RunManifest::new("prepare", config_hash(&(&pc, &bundle.manifest.catalog_hash)), config.seed);
    for name in RAW_FILES {
        run.input(&args.raw.join(name)).map_err(runtime)?;
    }
    run.outputs = written.files;
    run.output(&args.out, "manifest.json").map_err(runtime)?;
    run.funnel = Some(bundle.manifest.funnel.clone());
    run.timings = timer.timings;
    run.write(&args.out).map_err(runtime)
}

fn load_bundle(dir: &Path) -> Result<Bundle, Failure> {
    read_bundle(dir).map_err(etl_failure)
}

fn fold_list(bundle: &Bundle, folds: Option<usize>) -> Result<Vec<usize>, Failure> {
    let k = folds.unwrap_or(bundle.split.fold_count);
    if k == 0 || k > bundle.split.fold_count {
        return Err(Failure::Config(anyhow!(
            "--folds {k} must lie in 1..={}",
            bundle.split.fold_count
        )));
    }
    Ok((0..k).collect())
}

fn head_kind(head: Head) -> HeadKind {
    match head {
        Head::FourClass => HeadKind::FourClass,
        Head::Binary => HeadKind::BinaryDelirium,
    }
}

pub struct TrainArgs {
    pub bundle: PathBuf,
    pub out: PathBuf,
    pub head: Option<Head>,
    pub folds: Option<usize>,
}

#[derive(Serialize)]
struct FoldLog<'a> {
    fold: usize,
    diverged: bool,
    log: &'a TrainingLog,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAINING_LOG_FILE: &str = "training_log.json";

pub fn train_cmd(config: &RunConfig, args: &TrainArgs) -> Outcome {
    let mut mc = config.model.clone();
    if let Some(h) = args.head {
        mc.head = head_kind(h);
    }
    mc.validate().map_err(model_failure)?;
    config.train.validate().map_err(model_failure)?;
    let bundle = load_bundle(&args.bundle)?;
    let folds = fold_list(&bundle, args.folds)?;

    let mut timer = Timer::new();
    let mut models = Vec::with_capacity(folds.len());
    for &k in &folds {
        match train_fold(&bundle, k, &mc, &config.train) {
            Ok(m) => models.push(m),
            Err(PipelineError::Model(ModelError::Diverged { epoch, log })) => {
                create_dir(&args.out)?;
                let mut logs: Vec<FoldLog> = models
                    .iter()
                    .map(|m| FoldLog {
                        fold: m.fold,
                        diverged: false,
                        log: &m.log,
                    })
                    .collect();
                logs.push(FoldLog {
                    fold: k,
                    diverged: true,
                    log: &log,
                });
                write_file(&args.out, TRAINING_LOG_FILE, &json_bytes(&logs))?;
                return Err(runtime(anyhow!(
                    "fold {k} diverged at epoch {epoch}; log written to {}",
                    args.out.join(TRAINING_LOG_FILE).display()
                )));
            }
            Err(e) => return Err(pipeline_failure(e)),
        }
        timer.lap(&format!("fold_{k}"));
    }
    let checkpoint = Checkpoint {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: mc.clone(),
        train_config: config.train.clone(),
        catalog_hash: bundle.manifest.catalog_hash.clone(),
        seed: config.seed,
        folds: models,
    };
    create_dir(&args.out)?;
    save_checkpoint(&args.out.join(CHECKPOINT_FILE), &checkpoint).map_err(runtime)?;
    let logs: Vec<FoldLog> = checkpoint
        .folds
        .iter()
        .map(|m| FoldLog {
            fold: m.fold,
            diverged: false,
            log: &m.log,
        })
        .collect();
    write_file(&args.out, TRAINING_LOG_FILE, &json_bytes(&logs))?;

    let mut run = RunManifest::new("train", config_hash(&(&mc, &config.train, &bundle.manifest.catalog_hash)), config.seed);
    run.input(&args.bundle.join("manifest.json")).map_err(runtime)?;
    run.output(&args.out, CHECKPOINT_FILE).map_err(runtime)?;
    run.output(&args.out, TRAINING_LOG_FILE).map_err(runtime)?;
    run.timings = timer.timings;
    run.write(&args.out).map_err(runtime)
}

pub struct EvaluateArgs {
    pub bundle: PathBuf,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub baseline: Option<Baseline>,
    pub head: Option<Head>,
    pub folds: Option<usize>,
    pub bootstrap: Option<usize>,
    pub include_normal: bool,
}

pub const REPORT_FILE: &str = "report.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CURVES_CSV: &str = "curves.csv";

fn score<S: FoldScorer<Error = PipelineError>>(scorer: &S, folds: &[usize]) -> Result<Vec<FoldPredictions>, Failure> {
    folds
        .par_iter()
        .map(|&k| scorer.score_fold(k))
        .collect::<Result<_, _>>()
        .map_err(pipeline_failure)
}

pub fn evaluate_cmd(config: &RunConfig, args: &EvaluateArgs) -> Outcome {
    let mut ec: EvaluationConfig = config.evaluate.clone();
    if let Some(b) = args.bootstrap {
        ec.bootstrap.iterations = b;
    }
    ec.include_normal |= args.include_normal;
    ec.bootstrap.validate().map_err(|e| Failure::Config(e.into()))?;
    if args.checkpoint.is_some() == args.baseline.is_some() {
        return Err(Failure::Config(anyhow!("pass exactly one of --checkpoint and --baseline")));
    }
    let bundle = load_bundle(&args.bundle)?;
    let folds = fold_list(&bundle, args.folds)?;
    let catalog_hash = bundle.manifest.catalog_hash.clone();

    let mut timer = Timer::new();
    let mut run;
    let (predictions, meta) = if let Some(path) = &args.checkpoint {
        if let Some(dir) = path.parent() {
            if let Some(prior) = RunManifest::read(dir).map_err(runtime)? {
                let name = path.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default();
                prior.verify_output(dir, &name).map_err(runtime)?;
            }
        }
        let checkpoint = load_checkpoint(path, Some(&catalog_hash)).map_err(model_failure)?;
        if let Some(h) = args.head {
            if head_kind(h) != checkpoint.config.head {
                return Err(Failure::Config(anyhow!("--head does not match the checkpoint's head")));
            }
        }
        if let Some(k) = folds.iter().find(|&&k| !checkpoint.folds.iter().any(|m| m.fold == k)) {
            return Err(Failure::Config(anyhow!("checkpoint has no model for fold {k}")));
        }
        let task = checkpoint.config.head;
        let digest = acuity::etl::bundle::sha256_file(path).map_err(runtime)?;
        let hash = config_hash(&(&ec, &digest, &catalog_hash));
        run = RunManifest::new("evaluate", hash.clone(), ec.seed);
        run.input(path).map_err(runtime)?;
        let scorer = TransformerScorer {
            bundle: &bundle,
            checkpoint: &checkpoint,
        };
        (score(&scorer, &folds)?, ReportMeta { task, model: "transformer".into(), config_hash: hash })
    } else {
        let task = head_kind(args.head.unwrap_or(Head::FourClass));
        let baseline = args.baseline.expect("checked above");
        let name = baseline.name();
        let hash = match baseline {
            Baseline::Logistic => config_hash(&(&ec, name, &config.logistic, &catalog_hash, task)),
            _ => config_hash(&(&ec, name, &catalog_hash, task)),
        };
        run = RunManifest::new("evaluate", hash.clone(), ec.seed);
        let predictions = match baseline {
            Baseline::Logistic => score(
                &LogisticScorer {
                    bundle: &bundle,
                    head: task,
                    config: config.logistic.clone(),
                },
                &folds,
            )?,
            Baseline::Oracle | Baseline::Constant => score(
                &ReferenceScorer {
                    bundle: &bundle,
                    head: task,
                    kind: if baseline == Baseline::Oracle { ReferenceKind::Oracle } else { ReferenceKind::Constant },
                },
                &folds,
            )?,
        };
        (predictions, ReportMeta { task, model: name.into(), config_hash: hash })
    };
    timer.lap("score");
    let report = summarize_folds(&predictions, &meta, &ec).map_err(runtime)?;
    let curves = curves_csv(&predictions, meta.task, ec.include_normal).map_err(runtime)?;
    timer.lap("summarize");

    create_dir(&args.out)?;
    write_file(&args.out, REPORT_FILE, report.to_json().as_bytes())?;
    write_file(&args.out, METRICS_CSV, report.to_csv().as_bytes())?;
    write_file(&args.out, CURVES_CSV, curves.as_bytes())?;
    run.input(&args.bundle.join("manifest.json")).map_err(runtime)?;
    for name in [REPORT_FILE, METRICS_CSV, CURVES_CSV] {
        run.output(&args.out, name).map_err(runtime)?;
    }
    run.timings = timer.timings;
    run.write(&args.out).map_err(runtime)
}

pub struct ReportArgs {
    pub input: PathBuf,
    pub out: Option<PathBuf>,
}

/// Fixed-width table of every class and metric.
pub fn render(report: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "model {} task {:?} seed {} config {}", report.model, report.task, report.seed, &report.config_hash);
    let _ = writeln!(s, "{:<12} {:<12} {:>8} {:>8} {:>8} {:>6}", "class", "metric", "point", "low", "high", "n");
    for (class, metrics) in &report.metrics {
        for (metric, m) in metrics {
            let _ = writeln!(
                s,
                "{class:<12} {metric:<12} {:>8.4} {:>8.4} {:>8.4} {:>6}",
                m.point,
                m.ci_low,
                m.ci_high,
                m.values.len()
            );
        }
    }
    for f in &report.flags {
        let _ = writeln!(s, "flag: {f}");
    }
    s
}

pub fn report_cmd(args: &ReportArgs) -> Outcome {
    let text = std::fs::read_to_string(&args.input).map_err(|e| Failure::Config(anyhow!("{}: {e}", args.input.display())))?;
    let report: MetricsReport = serde_json::from_str(&text).with_context(|| args.input.display().to_string()).map_err(runtime)?;
    print!("{}", render(&report));
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_file(out, METRICS_CSV, report.to_csv().as_bytes())?;
    }
    Ok(())
}

pub struct LabelArgs {
    pub scores: PathBuf,
    pub out: PathBuf,
}

#[derive(Default)]
struct LabelStay {
    scores: Vec<TimedScore>,
    death: Option<i64>,
    last: i64,
}

/// Labels consecutive 12-hour shifts from minute 0 of each stay. Rows of
/// kind `death` (empty value) give the death time.
pub fn label_scores(csv_text: &str) -> anyhow::Result<Vec<(String, usize, AcuityLabel)>> {
    let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
    let mut stays: BTreeMap<String, LabelStay> = BTreeMap::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let stay = field(1).to_string();
        let time: i64 = field(2).parse().map_err(|_| anyhow!("row {}: bad time_min {:?}", line + 1, field(2)))?;
        let entry = stays.entry(stay).or_default();
        entry.last = entry.last.max(time);
        if field(3).eq_ignore_ascii_case("death") {
            entry.death = Some(time);
            continue;
        }
        let kind: ScoreKind = field(3).parse().map_err(|e| anyhow!("row {}: {e}", line + 1))?;
        let value = ScoreValue::parse(kind, field(4)).map_err(|e| anyhow!("row {}: {e}", line + 1))?;
        entry.scores.push(TimedScore::new(time, value).map_err(|e| anyhow!("row {}: {e}", line + 1))?);
    }
    let mut out = Vec::new();
    for (stay_id, stay) in stays {
        let n = (stay.last / SHIFT_MINUTES + 1) as usize;
        let spans: Vec<ShiftSpan> = (0..n)
            .map(|i| ShiftSpan {
                index: i,
                start: i as i64 * SHIFT_MINUTES,
                end: (i as i64 + 1) * SHIFT_MINUTES,
            })
            .collect();
        let stream = StayScores::from_mixed(&stay.scores, stay.death);
        for (index, label) in label_stay(&stream, &spans)? {
            out.push((stay_id.clone(), index, label));
        }
    }
    Ok(out)
}

pub fn label_cmd(args: &LabelArgs) -> Outcome {
    let text = std::fs::read_to_string(&args.scores).map_err(|e| Failure::Config(anyhow!("{}: {e}", args.scores.display())))?;
    let labels = label_scores(&text).map_err(runtime)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["stay_id", "shift_index", "label"]).map_err(runtime)?;
    for (stay, index, label) in &labels {
        w.write_record([stay.as_str(), &index.to_string(), label.as_str()]).map_err(runtime)?;
    }
    let bytes = w.into_inner().map_err(|e| runtime(anyhow!("{e}")))?;
    create_dir(&args.out)?;
    write_file(&args.out, "labels.csv", &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_shifts_from_score_rows() {
        let csv = "patient_id,stay_id,time_min,kind,value\n\
                   p,s1,10,rass,0\n\
                   p,s1,20,cam,negative\n\
                   p,s1,800,rass,-4\n\
                   p,s1,1500,cam,positive\n\
                   p,s1,1510,rass,1\n\
                   p,s1,2200,death,\n\
                   p,s2,5,gcs,7\n";
        let labels = label_scores(csv).unwrap();
        let got: Vec<(&str, usize, AcuityLabel)> = labels.iter().map(|(s, i, l)| (s.as_str(), *i, *l)).collect();
        assert_eq!(
            got,
            vec![
                ("s1", 0, AcuityLabel::Normal),
                ("s1", 1, AcuityLabel::Coma),
                ("s1", 2, AcuityLabel::Delirium),
                ("s1", 3, AcuityLabel::Dead),
                ("s2", 0, AcuityLabel::Coma),
            ]
        );
    }

    #[test]
    fn bad_score_rows_are_reported() {
        assert!(label_scores("patient_id,stay_id,time_min,kind,value\np,s,1,rass,9\n").is_err());
        assert!(label_scores("patient_id,stay_id,time_min,kind,value\np,s,x,rass,0\n").is_err());
        assert!(label_scores("patient_id,stay_id,time_min,kind,value\np,s,1,mood,0\n").is_err());
    }
}
