//! Command-line driver: synth, prepare, train, evaluate, report and label.

pub mod commands;
pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use commands::{EvaluateArgs, LabelArgs, PrepareArgs, ReportArgs, SynthArgs, TrainArgs};
use config::RunConfig;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

/// A failed command: bad usage or configuration, or a failure while running.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Head {
    FourClass,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Logistic,
    Oracle,
    Constant,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::Logistic => "logistic",
            Baseline::Oracle => "oracle",
            Baseline::Constant => "constant",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "acuity", version, about = "Shift-level brain acuity labeling, training and evaluation")]
pub struct Cli {
    /// Root seed for every stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// brain_acuity or delirium.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        patients: Option<usize>,
        #[arg(long)]
        signal: Option<f64>,
    },
    /// Label, filter, window, scale and split a raw cohort.
    Prepare {
        #[arg(long)]
        raw: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Variable catalog (JSON); defaults to the one in the raw manifest.
        #[arg(long)]
        catalog: Option<PathBuf>,
        /// Also write the aggregated matrix for the baseline.
        #[arg(long)]
        tabular: bool,
    },
    /// Train one model per cross-validation fold.
    Train {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        head: Option<Head>,
        /// Train folds 0..N.
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Score folds and write a metrics report.
    Evaluate {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        #[arg(long, value_enum)]
        head: Option<Head>,
        #[arg(long)]
        folds: Option<usize>,
        /// Bootstrap iterations per fold.
        #[arg(long)]
        bootstrap: Option<usize>,
        #[arg(long)]
        include_normal: bool,
    },
    /// Print a metrics report as a table.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Label shifts from a CSV of score rows.
    Label {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn execute(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Config(anyhow::anyhow!("--threads must be positive")));
        }
        // Fails only when a pool already exists, as in repeated in-process runs.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let preset = match &cli.command {
        Command::Synth { preset, .. } => preset.as_deref(),
        _ => None,
    };
    let config = RunConfig::load(cli.config.as_deref(), preset)
        .map_err(Failure::Config)?
        .with_seed(cli.seed);
    match cli.command {
        Command::Synth { out, patients, signal, .. } => commands::synth(&config, &SynthArgs { out, patients, signal }),
        Command::Prepare { raw, out, catalog, tabular } => commands::prepare_cmd(
            &config,
            &PrepareArgs {
                raw,
                out,
                catalog,
                tabular,
            },
        ),
        Command::Train { bundle, out, head, folds } => commands::train_cmd(&config, &TrainArgs { bundle, out, head, folds }),
        Command::Evaluate {
            bundle,
            out,
            checkpoint,
            baseline,
            head,
            folds,
            bootstrap,
            include_normal,
        } => commands::evaluate_cmd(
            &config,
            &EvaluateArgs {
                bundle,
                out,
                checkpoint,
                baseline,
                head,
                folds,
                bootstrap,
                include_normal,
            },
        ),
        Command::Report { input, out } => commands::report_cmd(&ReportArgs { input, out }),
        Command::Label { scores, out } => commands::label_cmd(&LabelArgs { scores, out }),
    }
}

/// Parses `args` and runs the command, printing any error to stderr.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let code = f.exit_code();
            let (Failure::Config(e) | Failure::Runtime(e)) = f;
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
