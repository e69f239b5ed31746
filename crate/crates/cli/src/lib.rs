//! The `birotate` command-line tool.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors.

pub mod analyze;
pub mod bench;
pub mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use birotate::metrics::{emit_reports, histogram, histogram_chart, MetricsRecord};
use birotate::nn::checkpoint;
use birotate::nn::train::adjusted_layer_weights;
use birotate::nn::{evaluate, train, Variant};
use clap::{Args, Parser, Subcommand};

use config::{DatasetKind, Overrides, Provenance, RunConfig};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config keys or paths: exit status 2.
    Usage(String),
    /// Anything that fails after the inputs were accepted: exit status 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<birotate::Error> for CliError {
    fn from(e: birotate::Error) -> Self {
        match e {
            birotate::Error::Config(m) => CliError::Usage(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "birotate", version, about = "Train, evaluate and analyze binary networks with learned weight rotations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write manifest, metrics, charts and a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Align standalone weights and report cosine, error and flip rate.
    Analyze(analyze::AnalyzeArgs),
    /// Time bi-rotation against the explicit full rotation.
    Bench(bench::BenchArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML run configuration; a previous run's manifest.toml replays it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// rbnn, B (baseline-xnor), B+R, B+T, B+T+R or B+T+R+A.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub dataset: Option<DatasetKind>,
    /// Directory with the MNIST IDX or CIFAR-10 binary files.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// `mlp:784-256-256-10`, `cnn-small` or `resnet-toy`.
    #[arg(long)]
    pub architecture: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Use only the first N training samples.
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// Use only the first N test samples.
    #[arg(long)]
    pub test_limit: Option<usize>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: birotate::Error| e.to_string())
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            variant: self.variant,
            dataset: self.dataset,
            data_dir: self.data_dir.clone(),
            architecture: self.architecture.clone(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            train_limit: self.train_limit,
            test_limit: self.test_limit,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Output directory.
    #[arg(long, default_value = "runs/latest")]
    pub out: PathBuf,
    /// Suppress the per-epoch progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint directory written by `train`. Its run's manifest.toml is
    /// used as the config when `--config` is absent.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Optional directory for `eval.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("birotate: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Analyze(a) => analyze::run(&a),
        Command::Bench(a) => bench::run(&a),
    }
}

fn epoch_line(r: &MetricsRecord, epochs: usize) -> String {
    let mut line = format!(
        "epoch {}/{} loss {:.4} train_acc {:.4} test_acc {:.4}",
        r.epoch + 1,
        epochs,
        r.loss,
        r.train_acc,
        r.test_acc
    );
    for l in &r.layers {
        line.push_str(&format!(
            " | {} cos {:.3}->{:.3} flip {:.3} alpha {:.3}",
            l.layer_id, l.cos_before, l.cos_after, l.flip_rate, l.alpha
        ));
    }
    line
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::resolve(args.common.config.as_deref(), &args.common.overrides())?;
    cfg.complete();
    let (train_set, test_set) = cfg.load_data()?;
    let arch = cfg.architecture(&train_set)?;

    let out = &args.out;
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let mut manifest = cfg.clone();
    manifest.provenance = Some(Provenance {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    });
    let manifest_path = out.join(MANIFEST_FILE);
    fs::write(&manifest_path, manifest.to_toml()).map_err(|e| io_error(&manifest_path, e))?;

    let epochs = cfg.train.epochs;
    let test = (!test_set.is_empty()).then_some(&test_set);
    let (state, records) = train(arch, &cfg.train, &train_set, test, |r| {
        if !args.quiet {
            println!("{}", epoch_line(r, epochs));
        }
    })?;

    emit_reports(&records, out)?;
    checkpoint::save(&state, cfg.train.seed, &out.join(CHECKPOINT_DIR))?;
    for i in state.arch.binarized_layers() {
        let w = adjusted_layer_weights(&state, i)?;
        let rms = (w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt().max(f64::MIN_POSITIVE);
        let counts = histogram(&w, 60, -3.0 * rms, 3.0 * rms)?;
        let id = state.arch.layer_id(i);
        let path = out.join(format!("hist_{id}.svg"));
        let svg = histogram_chart(&counts, -3.0 * rms, 3.0 * rms, &format!("{id}: weights before binarization"));
        fs::write(&path, svg).map_err(|e| io_error(&path, e))?;
    }
    if let Some(last) = records.last() {
        println!("final test_acc {:.4} ({} epochs, variant {})", last.test_acc, epochs, cfg.train.variant.label());
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let implied = args.checkpoint.parent().map(|p| p.join(MANIFEST_FILE)).filter(|p| p.is_file());
    let file = args.common.config.clone().or(implied);
    let mut cfg = RunConfig::resolve(file.as_deref(), &args.common.overrides())?;
    cfg.complete();
    if !args.checkpoint.join(checkpoint::MANIFEST).is_file() {
        return Err(CliError::Usage(format!("--checkpoint {}: no checkpoint manifest found", args.checkpoint.display())));
    }
    let ck = checkpoint::load(&args.checkpoint)?;
    let (_, test_set) = cfg.load_data()?;
    if test_set.shape != ck.state.arch.input || test_set.classes != ck.state.arch.classes {
        return Err(CliError::Usage(format!(
            "checkpoint expects {} inputs over {} classes; --dataset {} provides {} over {}",
            ck.state.arch.input, ck.state.arch.classes, cfg.data.dataset, test_set.shape, test_set.classes
        )));
    }
    let (loss, acc) = evaluate(&ck.state, &test_set, 1000)?;
    println!(
        "checkpoint {} variant {} epoch {}: samples {} loss {:.6} accuracy {:.4}",
        args.checkpoint.display(),
        ck.state.variant.label(),
        ck.state.epoch,
        test_set.len(),
        loss,
        acc
    );
    if let Some(out) = &args.out {
        fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
        let path = out.join("eval.csv");
        let csv = format!("samples,loss,accuracy\n{},{},{}\n", test_set.len(), loss, acc);
        fs::write(&path, csv).map_err(|e| io_error(&path, e))?;
    }
    Ok(())
}
