//! `birotate bench`: bi-rotation versus the explicit `n × n` rotation.

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use birotate::linalg::{matmul_at_b, random_gaussian, random_orthogonal, DenseMatrix};
use birotate::rotation::{align, balanced_factorization, reshape_to_block, RotationPair, DEFAULT_CYCLES};
use birotate::seed::{derive, Purpose};
use clap::Args;

use crate::CliError;

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated weight counts.
    #[arg(long, value_delimiter = ',', default_values_t = [64usize, 256, 1024])]
    pub sizes: Vec<usize>,
    /// Timings are the minimum over this many repetitions.
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for `bench.csv`; the CSV always goes to stdout too.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub const BENCH_HEADER: &str = "n,n1,n2,birotation_seconds,full_rotation_seconds,speedup,max_abs_diff,kron_build_seconds,align_seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub n1: usize,
    pub n2: usize,
    /// `R1ᵀ·W·R2`.
    pub birotation_seconds: f64,
    /// `(R1 ⊗ R2)ᵀ·vec(W)` with the Kronecker product already built.
    pub full_rotation_seconds: f64,
    pub max_abs_diff: f64,
    pub kron_build_seconds: f64,
    /// One full alignment (`DEFAULT_CYCLES` cycles) of the block.
    pub align_seconds: f64,
}

impl BenchRow {
    pub fn speedup(&self) -> f64 {
        self.full_rotation_seconds / self.birotation_seconds.max(f64::MIN_POSITIVE)
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.9},{:.9},{:.3},{:e},{:.9},{:.9}",
            self.n,
            self.n1,
            self.n2,
            self.birotation_seconds,
            self.full_rotation_seconds,
            self.speedup(),
            self.max_abs_diff,
            self.kron_build_seconds,
            self.align_seconds
        )
    }
}

fn best_of<T>(repeats: usize, mut f: impl FnMut() -> T) -> (f64, T) {
    let mut best = f64::INFINITY;
    let mut last = None;
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        let out = f();
        best = best.min(start.elapsed().as_secs_f64());
        last = Some(out);
    }
    (best, last.expect("at least one repetition"))
}

/// Times both ways of applying a Haar-random rotation pair to an `n`-weight
/// Gaussian block and reports how far apart the results are.
pub fn bench_size(n: usize, repeats: usize, seed: u64) -> Result<BenchRow, CliError> {
    if n == 0 {
        return Err(CliError::Usage("bench sizes must be positive".into()));
    }
    let (n1, n2) = balanced_factorization(n);
    let w = random_gaussian(n1, n2, derive(seed, Purpose::Synthetic, n as u64));
    let rot = RotationPair::new(
        random_orthogonal(n1, derive(seed, Purpose::Rotation, 0)),
        random_orthogonal(n2, derive(seed, Purpose::Rotation, 1)),
    )?;

    let (birotation_seconds, bi) = best_of(repeats, || rot.rotate(&w));
    let bi = bi?;
    let (kron_build_seconds, k) = best_of(repeats, || rot.full());
    let vec_w = DenseMatrix::new(n, 1, w.as_slice().to_vec())?;
    let (full_rotation_seconds, full) = best_of(repeats, || matmul_at_b(&k, &vec_w));
    let max_abs_diff = bi
        .as_slice()
        .iter()
        .zip(full.as_slice())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let block = reshape_to_block(w.as_slice(), &[n1, n2])?;
    let (align_seconds, aligned) = best_of(1, || align(&block, DEFAULT_CYCLES, None));
    aligned?;

    Ok(BenchRow {
        n,
        n1,
        n2,
        birotation_seconds,
        full_rotation_seconds,
        max_abs_diff,
        kron_build_seconds,
        align_seconds,
    })
}

pub fn run(args: &BenchArgs) -> Result<(), CliError> {
    if args.sizes.is_empty() {
        return Err(CliError::Usage("--sizes needs at least one value".into()));
    }
    let mut text = format!("{BENCH_HEADER}\n");
    println!("{BENCH_HEADER}");
    for &n in &args.sizes {
        let row = bench_size(n, args.repeats, args.seed)?;
        let line = row.csv_line();
        println!("{line}");
        text.push_str(&line);
        text.push('\n');
    }
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(|e| crate::io_error(dir, e))?;
        let path = dir.join("bench.csv");
        fs::write(&path, text).map_err(|e| crate::io_error(&path, e))?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}
