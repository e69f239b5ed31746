//! `birotate analyze`: alignment diagnostics on standalone tensors.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use birotate::data::synthetic_gaussian_weights;
use birotate::linalg::random_orthogonal;
use birotate::metrics::flip_rate;
use birotate::nn::checkpoint;
use birotate::nn::layer_metrics;
use birotate::quantize::quantization_error;
use birotate::rotation::{align, reshape_to_block, RotationPair, DEFAULT_CYCLES};
use birotate::seed::{derive, Purpose};
use clap::Args;

use crate::CliError;

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Blob file (length-prefixed little-endian f32 tensors), one row per blob.
    #[arg(long, conflicts_with_all = ["synthetic", "checkpoint"])]
    pub weights: Option<PathBuf>,
    /// Analyze N seeded standard-normal weights.
    #[arg(long, value_name = "N", conflicts_with = "checkpoint")]
    pub synthetic: Option<usize>,
    /// Per-layer table of a training checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_CYCLES)]
    pub cycles: usize,
    /// Start the alignment from identity rotations instead of a seeded
    /// random orthogonal pair.
    #[arg(long)]
    pub identity_start: bool,
    /// Directory for `analysis.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub const ANALYSIS_HEADER: &str = "tensor,n,n1,n2,cos_before,cos_after,qerr_base,qerr_rot,flip_rate,objective_history";

/// Alignment outcome for one flattened tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisRow {
    pub tensor: String,
    pub n: usize,
    pub n1: usize,
    pub n2: usize,
    pub cos_before: f64,
    pub cos_after: f64,
    pub qerr_base: f64,
    pub qerr_rot: f64,
    pub flip_rate: f64,
    pub objective_history: Vec<f64>,
}

impl AnalysisRow {
    pub fn csv_line(&self) -> String {
        let history: Vec<String> = self.objective_history.iter().map(|v| v.to_string()).collect();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.tensor,
            self.n,
            self.n1,
            self.n2,
            self.cos_before,
            self.cos_after,
            self.qerr_base,
            self.qerr_rot,
            self.flip_rate,
            history.join(";")
        )
    }
}

/// Aligns `weights` as a balanced `n1 × n2` block. With `warm_seed` the
/// alignment starts from a Haar-random pair derived from it.
pub fn analyze_tensor(tensor: &str, weights: &[f64], cycles: usize, warm_seed: Option<u64>) -> Result<AnalysisRow, CliError> {
    if weights.is_empty() {
        return Err(CliError::Runtime(format!("{tensor}: empty tensor")));
    }
    let block = reshape_to_block(weights, &[weights.len()])?.with_id(tensor);
    let (n1, n2) = (block.n1(), block.n2());
    let warm = warm_seed
        .map(|s| {
            RotationPair::new(
                random_orthogonal(n1, derive(s, Purpose::Rotation, 0)),
                random_orthogonal(n2, derive(s, Purpose::Rotation, 1)),
            )
        })
        .transpose()?;
    let result = align(&block, cycles, warm.as_ref())?;
    let rotated = result.rotation.rotate(&block.matrix)?.into_vec();
    Ok(AnalysisRow {
        tensor: tensor.to_string(),
        n: weights.len(),
        n1,
        n2,
        cos_before: result.cos_before.unwrap_or(0.0),
        cos_after: result.cos_after.unwrap_or(0.0),
        qerr_base: quantization_error(weights)?.error,
        qerr_rot: quantization_error(&rotated)?.error,
        flip_rate: flip_rate(weights, &rotated)?,
        objective_history: result.objective_trace,
    })
}

fn write_csv(out: &Option<PathBuf>, name: &str, header: &str, lines: &[String]) -> Result<(), CliError> {
    let Some(dir) = out else { return Ok(()) };
    fs::create_dir_all(dir).map_err(|e| crate::io_error(dir, e))?;
    let mut text = String::from(header);
    text.push('\n');
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| crate::io_error(&path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn print_row(r: &AnalysisRow) {
    let mut history = String::new();
    for (i, v) in r.objective_history.iter().enumerate() {
        let sep = if i == 0 { "" } else { " " };
        let _ = write!(history, "{sep}{v:.6}");
    }
    println!("tensor {} n {} factorization ({}, {})", r.tensor, r.n, r.n1, r.n2);
    println!("  cos_before {:.6} cos_after {:.6} gain {:+.6}", r.cos_before, r.cos_after, r.cos_after - r.cos_before);
    println!("  qerr_base {:.6} qerr_rot {:.6} (per weight {:.6} -> {:.6})", r.qerr_base, r.qerr_rot, r.qerr_base / r.n as f64, r.qerr_rot / r.n as f64);
    println!("  flip_rate {:.4}", r.flip_rate);
    println!("  objective {history}");
}

pub fn run(args: &AnalyzeArgs) -> Result<(), CliError> {
    if args.cycles == 0 {
        return Err(CliError::Usage("--cycles must be at least 1".into()));
    }
    let warm = (!args.identity_start).then_some(args.seed);

    if let Some(dir) = &args.checkpoint {
        if !dir.join(checkpoint::MANIFEST).is_file() {
            return Err(CliError::Usage(format!("--checkpoint {}: no checkpoint manifest found", dir.display())));
        }
        let ck = checkpoint::load(dir)?;
        let metrics = layer_metrics(&ck.state)?;
        let header = "layer_id,weights,cos_before,cos_after,qerr_base,qerr_rot,flip_rate,alpha";
        println!("{header}");
        let lines: Vec<String> = metrics
            .iter()
            .map(|m| {
                format!(
                    "{},{},{},{},{},{},{},{}",
                    m.layer_id, m.weight_count, m.cos_before, m.cos_after, m.qerr_base, m.qerr_rot, m.flip_rate, m.alpha
                )
            })
            .collect();
        for l in &lines {
            println!("{l}");
        }
        return write_csv(&args.out, "analysis.csv", header, &lines);
    }

    let tensors: Vec<(String, Vec<f64>)> = match (&args.weights, args.synthetic) {
        (Some(path), _) => birotate::nn::checkpoint::read_blobs(path)?
            .into_iter()
            .enumerate()
            .map(|(i, w)| (format!("blob{i}"), w))
            .collect(),
        (None, Some(n)) => {
            if n == 0 {
                return Err(CliError::Usage("--synthetic needs at least one weight".into()));
            }
            vec![(format!("synthetic{n}"), synthetic_gaussian_weights(n, args.seed))]
        }
        (None, None) => return Err(CliError::Usage("one of --weights, --synthetic or --checkpoint is required".into())),
    };

    let mut lines = Vec::new();
    for (name, w) in &tensors {
        let row = analyze_tensor(name, w, args.cycles, warm)?;
        print_row(&row);
        lines.push(row.csv_line());
    }
    write_csv(&args.out, "analysis.csv", ANALYSIS_HEADER, &lines)
}
