//! Dataset ingestion (IDX, CIFAR-10 binary), normalization, synthetic
//! generators and seeded batching.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::spec::Shape3;
use crate::seed::{self, Purpose};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_BYTES: usize = 3073;
pub const CIFAR_SHAPE: Shape3 = Shape3 {
    channels: 3,
    height: 32,
    width: 32,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Synthetic,
}

/// Images (sample-major, `count × C × H × W`) and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub shape: Shape3,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<u8>, shape: Shape3, classes: usize, split: Split) -> Result<Self> {
        if images.len() != labels.len() * shape.len() {
            return Err(Error::Shape(format!(
                "{} image values for {} labels of shape {shape}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::InvalidInput(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            shape,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.shape.len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Inputs of the selected samples, widened to `f64` and concatenated.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f64>, Vec<u8>) {
        let mut inputs = Vec::with_capacity(indices.len() * self.shape.len());
        for &i in indices {
            inputs.extend(self.sample(i).iter().map(|&v| v as f64));
        }
        (inputs, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `count` samples.
    pub fn take(&self, count: usize) -> Self {
        let count = count.min(self.len());
        Self {
            images: self.images[..count * self.shape.len()].to_vec(),
            labels: self.labels[..count].to_vec(),
            shape: self.shape,
            classes: self.classes,
            split: self.split,
        }
    }
}

/// Per-channel `(x − mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn mnist() -> Self {
        Self {
            mean: vec![0.1307],
            std: vec![0.3081],
        }
    }

    pub fn cifar10() -> Self {
        Self {
            mean: vec![0.4914, 0.4822, 0.4465],
            std: vec![0.2470, 0.2435, 0.2616],
        }
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    fn check(&self, shape: Shape3) -> Result<()> {
        if self.mean.len() != shape.channels || self.std.len() != shape.channels {
            return Err(Error::Shape(format!(
                "normalization has {} means and {} stds for {} channels",
                self.mean.len(),
                self.std.len(),
                shape.channels
            )));
        }
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidInput("normalization stds must be positive".into()));
        }
        Ok(())
    }

    pub fn apply(&self, ds: &mut Dataset) -> Result<()> {
        self.map(ds, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, ds: &mut Dataset) -> Result<()> {
        self.map(ds, |v, m, s| v * s + m)
    }

    fn map(&self, ds: &mut Dataset, f: impl Fn(f64, f64, f64) -> f64) -> Result<()> {
        self.check(ds.shape)?;
        let plane = ds.shape.spatial();
        for (i, chunk) in ds.images.chunks_exact_mut(plane).enumerate() {
            let c = i % ds.shape.channels;
            for v in chunk {
                *v = f(*v as f64, self.mean[c], self.std[c]) as f32;
            }
        }
        Ok(())
    }
}

fn format_error(path: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_error(path, bytes.len() as u64, format!("file ends inside the {what} field")))
}

/// Reads an IDX image/label pair. Pixels are scaled to `[0, 1]`; no
/// normalization is applied.
pub fn load_idx(images_path: &Path, labels_path: &Path, classes: usize) -> Result<Dataset> {
    let img = read_file(images_path)?;
    let magic = read_u32(&img, 0, images_path, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_error(images_path, 0, format!("magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let count = read_u32(&img, 4, images_path, "image count")? as usize;
    let rows = read_u32(&img, 8, images_path, "row count")? as usize;
    let cols = read_u32(&img, 12, images_path, "column count")? as usize;
    let pixels = count * rows * cols;
    if img.len() < 16 + pixels {
        return Err(format_error(
            images_path,
            img.len() as u64,
            format!("truncated: header promises {count} images of {rows}x{cols} ({} bytes)", 16 + pixels),
        ));
    }

    let lab = read_file(labels_path)?;
    let magic = read_u32(&lab, 0, labels_path, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_error(labels_path, 0, format!("magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let label_count = read_u32(&lab, 4, labels_path, "label count")? as usize;
    if label_count != count {
        return Err(format_error(labels_path, 4, format!("{label_count} labels for {count} images")));
    }
    if lab.len() < 8 + count {
        return Err(format_error(labels_path, lab.len() as u64, format!("truncated: header promises {count} labels")));
    }
    let labels = lab[8..8 + count].to_vec();
    if let Some(pos) = labels.iter().position(|&l| l as usize >= classes) {
        return Err(format_error(labels_path, (8 + pos) as u64, format!("label {} out of range", labels[pos])));
    }
    let images = img[16..16 + pixels].iter().map(|&p| p as f32 / 255.0).collect();
    Dataset::new(images, labels, Shape3::new(1, rows, cols), classes, Split::Train)
}

/// Standard MNIST file names inside `dir`, normalized with `norm`.
pub fn load_mnist(dir: &Path, split: Split, norm: &Normalization) -> Result<Dataset> {
    let prefix = match split {
        Split::Test => "t10k",
        _ => "train",
    };
    let mut ds = load_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
        10,
    )?;
    ds.split = split;
    norm.apply(&mut ds)?;
    Ok(ds)
}

/// Parses one CIFAR-10 binary batch file into raw `[0, 1]` pixels.
pub fn load_cifar10_file(path: &Path) -> Result<Dataset> {
    let bytes = read_file(path)?;
    if bytes.is_empty() {
        return Err(format_error(path, 0, "empty file"));
    }
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        let complete = bytes.len() / CIFAR_RECORD_BYTES;
        return Err(format_error(
            path,
            (complete * CIFAR_RECORD_BYTES) as u64,
            format!("{} bytes is not a whole number of {CIFAR_RECORD_BYTES}-byte records", bytes.len()),
        ));
    }
    let count = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(count);
    let mut images = Vec::with_capacity(count * CIFAR_SHAPE.len());
    for (r, record) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        if record[0] >= 10 {
            return Err(format_error(path, (r * CIFAR_RECORD_BYTES) as u64, format!("label {} out of range", record[0])));
        }
        labels.push(record[0]);
        images.extend(record[1..].iter().map(|&p| p as f32 / 255.0));
    }
    Dataset::new(images, labels, CIFAR_SHAPE, 10, Split::Train)
}

/// The five training batches or the test batch from a CIFAR-10 binary
/// directory, normalized per channel.
pub fn load_cifar10(dir: &Path, split: Split, norm: &Normalization) -> Result<Dataset> {
    let files: Vec<PathBuf> = match split {
        Split::Test => vec![dir.join("test_batch.bin")],
        _ => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in &files {
        let part = load_cifar10_file(f)?;
        images.extend(part.images);
        labels.extend(part.labels);
    }
    let mut ds = Dataset::new(images, labels, CIFAR_SHAPE, 10, split)?;
    norm.apply(&mut ds)?;
    Ok(ds)
}

/// Writes an IDX image file (`count × rows × cols` bytes).
pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend(v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend(IDX_LABELS_MAGIC.to_be_bytes());
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Seeded standard Gaussian vector.
pub fn synthetic_gaussian_weights(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = seed::stream(seed, Purpose::Synthetic, 0);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Linearly separable classification data: Gaussian inputs labelled by the
/// argmax of a random linear map. Samples whose two best scores differ by
/// less than `margin` are redrawn.
pub fn synthetic_classification(count: usize, features: usize, classes: usize, margin: f64, seed: u64) -> Result<Dataset> {
    if features == 0 || classes < 2 {
        return Err(Error::InvalidInput("need at least one feature and two classes".into()));
    }
    if !(margin >= 0.0 && margin < features as f64) {
        return Err(Error::InvalidInput(format!("margin {margin} must lie in [0, {features})")));
    }
    let mut rng = seed::stream(seed, Purpose::Synthetic, 1);
    let map: Vec<f64> = (0..classes * features).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut images = Vec::with_capacity(count * features);
    let mut labels = Vec::with_capacity(count);
    while labels.len() < count {
        let x: Vec<f64> = (0..features).map(|_| StandardNormal.sample(&mut rng)).collect();
        let scores: Vec<f64> = map
            .chunks_exact(features)
            .map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum())
            .collect();
        let best = crate::nn::engine::argmax(&scores);
        let runner_up = scores
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != best)
            .map(|(_, &s)| s)
            .fold(f64::NEG_INFINITY, f64::max);
        if scores[best] - runner_up < margin {
            continue;
        }
        labels.push(best as u8);
        images.extend(x.iter().map(|&v| v as f32));
    }
    Dataset::new(images, labels, Shape3::flat(features), classes, Split::Synthetic)
}

/// Index batches for one epoch: a permutation that depends only on
/// `(seed, epoch)`, cut into `batch_size` chunks with the remainder kept.
pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut seed::stream(seed, Purpose::Shuffle, epoch as u64));
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Random crop after zero padding by `pad`, then a horizontal flip with
/// probability one half, applied in place to a batch of samples.
pub fn augment(inputs: &mut [f64], shape: Shape3, pad: usize, rng: &mut impl Rng) {
    let (h, w) = (shape.height, shape.width);
    let mut scratch = vec![0.0; shape.len()];
    for sample in inputs.chunks_exact_mut(shape.len()) {
        let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let flip = rng.random_bool(0.5);
        for c in 0..shape.channels {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + dy;
                    let sx0 = if flip { (w - 1 - x) as isize } else { x as isize };
                    let sx = sx0 + dx;
                    scratch[(c * h + y) * w + x] = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        sample[(c * h + sy as usize) * w + sx as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
        sample.copy_from_slice(&scratch);
    }
}
