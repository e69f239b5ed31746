//! Forward and backward passes over a batch.
//!
//! Activations are stored sample-major: a batch of `B` samples of shape
//! `C×H×W` is a flat `B·C·H·W` vector. The ±1 products of binarized layers are
//! computed with ordinary floating-point arithmetic.

use crate::error::{Error, Result};
use crate::linalg::{gemm, DenseMatrix};
use crate::nn::spec::{LayerSpec, PoolKind, Shape3};
use crate::nn::state::{Gradients, LayerGradient, NetworkState};
use crate::quantize::{sign, ApproxSchedule};

pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// `F` replaces sign and batch norm uses batch statistics.
    Train,
    /// Hard sign and running statistics.
    Eval,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    mode: Mode,
    batch: usize,
    /// `activations[i]` is the input of layer `i`; the last entry holds the logits.
    activations: Vec<Vec<f64>>,
    layers: Vec<LayerCache>,
}

#[derive(Debug, Clone)]
enum LayerCache {
    Plain,
    Weighted {
        /// Input after activation binarization (absent for real-valued input).
        input_binary: Option<Vec<f64>>,
        weights: WeightCache,
    },
    Norm {
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    MaxPool {
        argmax: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct WeightCache {
    /// Weights entering the product: latent, `F(w̃)`, `sign(w̃)` or `λ·sign(w̃)`.
    effective: Vec<f64>,
    /// `w̃` and `Rᵀw` for binarized layers.
    adjusted: Option<Vec<f64>>,
    rotated: Option<Vec<f64>>,
    lambda: f64,
}

impl ForwardCache {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn logits(&self) -> &[f64] {
        self.activations.last().expect("logits")
    }

    /// Input activation of layer `i` (`i = layers` gives the logits).
    pub fn activation(&self, i: usize) -> &[f64] {
        &self.activations[i]
    }

    /// Index of the first layer whose output contains a non-finite value.
    pub fn first_non_finite_layer(&self) -> Option<usize> {
        self.activations[1..]
            .iter()
            .position(|a| a.iter().any(|v| !v.is_finite()))
    }

    /// Batch mean and variance of each batch-norm layer, for running statistics.
    pub fn batch_statistics(&self) -> impl Iterator<Item = (usize, &[f64], &[f64])> {
        self.layers.iter().enumerate().filter_map(|(i, c)| match c {
            LayerCache::Norm { mean, var, .. } => Some((i, mean.as_slice(), var.as_slice())),
            _ => None,
        })
    }
}

/// Binarization of activations entering a binarized layer.
fn binarize_input(x: &[f64], sched: &ApproxSchedule, mode: Mode, approx: bool) -> Vec<f64> {
    match (mode, approx) {
        (Mode::Train, true) => x.iter().map(|&v| sched.value(v)).collect(),
        _ => x.iter().map(|&v| sign(v)).collect(),
    }
}

/// Derivative of [`binarize_input`]: `F′` or the clipped straight-through mask.
fn input_slope(x: f64, sched: &ApproxSchedule, approx: bool) -> f64 {
    if approx {
        sched.slope(x)
    } else if x.abs() <= 1.0 {
        1.0
    } else {
        0.0
    }
}

fn effective_weights(
    state: &NetworkState,
    index: usize,
    sched: &ApproxSchedule,
    mode: Mode,
) -> Result<WeightCache> {
    let spec = &state.arch.layers[index];
    let layer = &state.layers[index];
    if !spec.is_binarized() {
        return Ok(WeightCache {
            effective: layer.weights.clone(),
            adjusted: None,
            rotated: None,
            lambda: 1.0,
        });
    }
    let (rotated, adjusted) = match &layer.rotation {
        Some(rot) => {
            let block = DenseMatrix::new(rot.n1(), rot.n2(), layer.weights.clone())?;
            let rotated = rot.rotate(&block)?.into_vec();
            let alpha = state.alpha(index);
            let adjusted = layer
                .weights
                .iter()
                .zip(&rotated)
                .map(|(&w, &r)| w + alpha * (r - w))
                .collect();
            (Some(rotated), adjusted)
        }
        None => (None, layer.weights.clone()),
    };
    let variant = state.variant;
    let (effective, lambda) = if variant.uses_approx() {
        let eff = match mode {
            Mode::Train => adjusted.iter().map(|&v| sched.value(v)).collect(),
            Mode::Eval => adjusted.iter().map(|&v| sign(v)).collect(),
        };
        (eff, 1.0)
    } else {
        let lambda = adjusted.iter().map(|v| v.abs()).sum::<f64>() / adjusted.len() as f64;
        (adjusted.iter().map(|&v| lambda * sign(v)).collect(), lambda)
    };
    Ok(WeightCache {
        effective,
        adjusted: Some(adjusted),
        rotated,
        lambda,
    })
}

fn conv_geometry(input: Shape3, kernel: usize, stride: usize, padding: usize) -> (usize, usize) {
    (
        (input.height + 2 * padding - kernel) / stride + 1,
        (input.width + 2 * padding - kernel) / stride + 1,
    )
}

/// Unfolds one sample into a `(C·k·k) × (Ho·Wo)` matrix.
fn im2col(x: &[f64], input: Shape3, kernel: usize, stride: usize, padding: usize, col: &mut [f64]) {
    let (ho, wo) = conv_geometry(input, kernel, stride, padding);
    let positions = ho * wo;
    for c in 0..input.channels {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let dst = &mut col[row * positions..(row + 1) * positions];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        dst[oy * wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < input.height && (ix as usize) < input.width {
                            x[(c * input.height + iy as usize) * input.width + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the sample.
fn col2im(col: &[f64], input: Shape3, kernel: usize, stride: usize, padding: usize, dx: &mut [f64]) {
    let (ho, wo) = conv_geometry(input, kernel, stride, padding);
    let positions = ho * wo;
    for c in 0..input.channels {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let src = &col[row * positions..(row + 1) * positions];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy as usize >= input.height {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && (ix as usize) < input.width {
                            dx[(c * input.height + iy as usize) * input.width + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Runs the network on `inputs` (`batch` samples, sample-major).
pub fn forward(
    state: &NetworkState,
    inputs: &[f64],
    batch: usize,
    sched: &ApproxSchedule,
    mode: Mode,
) -> Result<ForwardCache> {
    let arch = &state.arch;
    let sample = arch.input.len();
    if batch == 0 || inputs.len() != batch * sample {
        return Err(Error::Shape(format!(
            "expected {batch} samples of {sample} values ({}), got {} values",
            arch.input,
            inputs.len()
        )));
    }
    let approx = state.variant.uses_approx();
    let mut activations = Vec::with_capacity(arch.layers.len() + 1);
    activations.push(inputs.to_vec());
    let mut caches = Vec::with_capacity(arch.layers.len());

    for (i, spec) in arch.layers.iter().enumerate() {
        let x = activations.last().expect("input");
        let in_shape = arch.shapes[i];
        let out_shape = arch.shapes[i + 1];
        let mut y = vec![0.0; batch * out_shape.len()];
        let cache = match spec {
            LayerSpec::Dense { inputs: n_in, outputs: n_out, .. } => {
                let (n_in, n_out) = (*n_in, *n_out);
                let input_binary = spec.binarizes_input().then(|| binarize_input(x, sched, mode, approx));
                let weights = effective_weights(state, i, sched, mode)?;
                let xb = input_binary.as_deref().unwrap_or(x);
                let bias = &state.layers[i].bias;
                for row in y.chunks_exact_mut(n_out) {
                    row.copy_from_slice(bias);
                }
                gemm(batch, n_in, n_out, 1.0, xb, (n_in as isize, 1), &weights.effective, (1, n_in as isize), 1.0, &mut y, n_out as isize);
                LayerCache::Weighted { input_binary, weights }
            }
            LayerSpec::Conv2d {
                input,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let input_binary = spec.binarizes_input().then(|| binarize_input(x, sched, mode, approx));
                let weights = effective_weights(state, i, sched, mode)?;
                let xb = input_binary.as_deref().unwrap_or(x);
                let k_len = input.channels * kernel * kernel;
                let positions = out_shape.spatial();
                let mut col = vec![0.0; k_len * positions];
                let bias = &state.layers[i].bias;
                for (s, ys) in y.chunks_exact_mut(out_shape.len()).enumerate() {
                    im2col(&xb[s * in_shape.len()..(s + 1) * in_shape.len()], *input, *kernel, *stride, *padding, &mut col);
                    for (c, plane) in ys.chunks_exact_mut(positions).enumerate() {
                        plane.fill(bias[c]);
                    }
                    gemm(*out_channels, k_len, positions, 1.0, &weights.effective, (k_len as isize, 1), &col, (positions as isize, 1), 1.0, ys, positions as isize);
                }
                LayerCache::Weighted { input_binary, weights }
            }
            LayerSpec::BatchNorm { channels, spatial } => {
                let (channels, spatial) = (*channels, *spatial);
                let layer = &state.layers[i];
                let (mean, var) = match mode {
                    Mode::Train => channel_moments(x, batch, channels, spatial),
                    Mode::Eval => (layer.running_mean.clone(), layer.running_var.clone()),
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
                let mut normalized = vec![0.0; x.len()];
                for s in 0..batch {
                    for c in 0..channels {
                        let base = (s * channels + c) * spatial;
                        for p in base..base + spatial {
                            let xh = (x[p] - mean[c]) * inv_std[c];
                            normalized[p] = xh;
                            y[p] = layer.weights[c] * xh + layer.bias[c];
                        }
                    }
                }
                LayerCache::Norm {
                    normalized,
                    inv_std,
                    mean,
                    var,
                }
            }
            LayerSpec::Pool { kind, input, size } => {
                let (ho, wo) = (out_shape.height, out_shape.width);
                let mut argmax = Vec::new();
                if *kind == PoolKind::Max {
                    argmax = vec![0; y.len()];
                }
                for s in 0..batch {
                    for c in 0..input.channels {
                        let plane = (s * input.channels + c) * input.spatial();
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let out = ((s * input.channels + c) * ho + oy) * wo + ox;
                                let mut best = f64::NEG_INFINITY;
                                let mut best_at = plane;
                                let mut sum = 0.0;
                                for dy in 0..*size {
                                    for dx in 0..*size {
                                        let at = plane + (oy * size + dy) * input.width + ox * size + dx;
                                        sum += x[at];
                                        if x[at] > best {
                                            best = x[at];
                                            best_at = at;
                                        }
                                    }
                                }
                                match kind {
                                    PoolKind::Max => {
                                        y[out] = best;
                                        argmax[out] = best_at;
                                    }
                                    PoolKind::Avg => y[out] = sum / (size * size) as f64,
                                }
                            }
                        }
                    }
                }
                match kind {
                    PoolKind::Max => LayerCache::MaxPool { argmax },
                    PoolKind::Avg => LayerCache::Plain,
                }
            }
            LayerSpec::ShortcutAdd { source } => {
                for ((o, a), b) in y.iter_mut().zip(x).zip(&activations[*source]) {
                    *o = a + b;
                }
                LayerCache::Plain
            }
        };
        caches.push(cache);
        activations.push(y);
    }

    Ok(ForwardCache {
        mode,
        batch,
        activations,
        layers: caches,
    })
}

/// Per-channel mean and biased variance over batch and spatial positions.
fn channel_moments(x: &[f64], batch: usize, channels: usize, spatial: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (batch * spatial) as f64;
    let mut mean = vec![0.0; channels];
    for s in 0..batch {
        for c in 0..channels {
            let base = (s * channels + c) * spatial;
            mean[c] += x[base..base + spatial].iter().sum::<f64>();
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    let mut var = vec![0.0; channels];
    for s in 0..batch {
        for c in 0..channels {
            let base = (s * channels + c) * spatial;
            var[c] += x[base..base + spatial].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
        }
    }
    for v in &mut var {
        *v /= count;
    }
    (mean, var)
}

/// Gradient of the loss with respect to every trainable parameter, given
/// `d loss / d logits`.
pub fn backward(
    state: &NetworkState,
    cache: &ForwardCache,
    logits_grad: &[f64],
    sched: &ApproxSchedule,
) -> Result<Gradients> {
    let arch = &state.arch;
    if cache.mode != Mode::Train {
        return Err(Error::MissingCache("the cache comes from an eval-mode forward pass".into()));
    }
    if cache.layers.len() != arch.layers.len() || cache.activations.len() != arch.layers.len() + 1 {
        return Err(Error::MissingCache("the cache belongs to a different architecture".into()));
    }
    for (i, shape) in arch.shapes.iter().enumerate() {
        if cache.activations[i].len() != cache.batch * shape.len() {
            return Err(Error::MissingCache(format!("activation {i} has the wrong size")));
        }
    }
    if logits_grad.len() != cache.logits().len() {
        return Err(Error::Shape(format!(
            "logit gradient has {} values, logits have {}",
            logits_grad.len(),
            cache.logits().len()
        )));
    }

    let batch = cache.batch;
    let approx = state.variant.uses_approx();
    let mut grads: Vec<Vec<f64>> = arch.shapes.iter().map(|s| vec![0.0; batch * s.len()]).collect();
    *grads.last_mut().expect("logits") = logits_grad.to_vec();
    let mut out = Gradients::zeros_like(&state.layers);

    for i in (0..arch.layers.len()).rev() {
        let spec = &arch.layers[i];
        let dy = std::mem::take(&mut grads[i + 1]);
        let x = &cache.activations[i];
        let in_shape = arch.shapes[i];
        let out_shape = arch.shapes[i + 1];
        let layer_grad = &mut out.layers[i];
        match (spec, &cache.layers[i]) {
            (LayerSpec::Dense { inputs: n_in, outputs: n_out, .. }, LayerCache::Weighted { input_binary, weights }) => {
                let (n_in, n_out) = (*n_in, *n_out);
                let xb = input_binary.as_deref().unwrap_or(x);
                for row in dy.chunks_exact(n_out) {
                    for (b, g) in layer_grad.bias.iter_mut().zip(row) {
                        *b += g;
                    }
                }
                let mut d_eff = vec![0.0; n_out * n_in];
                gemm(n_out, batch, n_in, 1.0, &dy, (1, n_out as isize), xb, (n_in as isize, 1), 0.0, &mut d_eff, n_in as isize);
                let mut dxb = vec![0.0; batch * n_in];
                gemm(batch, n_out, n_in, 1.0, &dy, (n_out as isize, 1), &weights.effective, (n_in as isize, 1), 0.0, &mut dxb, n_in as isize);
                weight_gradient(state, i, weights, &d_eff, sched, layer_grad)?;
                input_gradient(spec, x, dxb, sched, approx, &mut grads[i]);
            }
            (
                LayerSpec::Conv2d {
                    input,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                },
                LayerCache::Weighted { input_binary, weights },
            ) => {
                let xb = input_binary.as_deref().unwrap_or(x);
                let k_len = input.channels * kernel * kernel;
                let positions = out_shape.spatial();
                let mut col = vec![0.0; k_len * positions];
                let mut dcol = vec![0.0; k_len * positions];
                let mut d_eff = vec![0.0; out_channels * k_len];
                let mut dxb = vec![0.0; batch * in_shape.len()];
                for s in 0..batch {
                    let dys = &dy[s * out_shape.len()..(s + 1) * out_shape.len()];
                    for (c, plane) in dys.chunks_exact(positions).enumerate() {
                        layer_grad.bias[c] += plane.iter().sum::<f64>();
                    }
                    im2col(&xb[s * in_shape.len()..(s + 1) * in_shape.len()], *input, *kernel, *stride, *padding, &mut col);
                    gemm(*out_channels, positions, k_len, 1.0, dys, (positions as isize, 1), &col, (1, positions as isize), 1.0, &mut d_eff, k_len as isize);
                    gemm(k_len, *out_channels, positions, 1.0, &weights.effective, (1, k_len as isize), dys, (positions as isize, 1), 0.0, &mut dcol, positions as isize);
                    col2im(&dcol, *input, *kernel, *stride, *padding, &mut dxb[s * in_shape.len()..(s + 1) * in_shape.len()]);
                }
                weight_gradient(state, i, weights, &d_eff, sched, layer_grad)?;
                input_gradient(spec, x, dxb, sched, approx, &mut grads[i]);
            }
            (
                LayerSpec::BatchNorm { channels, spatial },
                LayerCache::Norm {
                    normalized, inv_std, ..
                },
            ) => {
                let (channels, spatial) = (*channels, *spatial);
                let gamma = &state.layers[i].weights;
                let mut sum_dy = vec![0.0; channels];
                let mut sum_dy_xhat = vec![0.0; channels];
                for s in 0..batch {
                    for c in 0..channels {
                        let base = (s * channels + c) * spatial;
                        for p in base..base + spatial {
                            sum_dy[c] += dy[p];
                            sum_dy_xhat[c] += dy[p] * normalized[p];
                        }
                    }
                }
                layer_grad.weights.copy_from_slice(&sum_dy_xhat);
                layer_grad.bias.copy_from_slice(&sum_dy);
                let count = (batch * spatial) as f64;
                let dx = &mut grads[i];
                for s in 0..batch {
                    for c in 0..channels {
                        let scale = gamma[c] * inv_std[c] / count;
                        let base = (s * channels + c) * spatial;
                        for p in base..base + spatial {
                            dx[p] += scale * (count * dy[p] - sum_dy[c] - normalized[p] * sum_dy_xhat[c]);
                        }
                    }
                }
            }
            (LayerSpec::Pool { kind: PoolKind::Max, .. }, LayerCache::MaxPool { argmax }) => {
                let dx = &mut grads[i];
                for (g, &at) in dy.iter().zip(argmax) {
                    dx[at] += g;
                }
            }
            (LayerSpec::Pool { kind: PoolKind::Avg, input, size }, LayerCache::Plain) => {
                let (ho, wo) = (out_shape.height, out_shape.width);
                let share = 1.0 / (size * size) as f64;
                let dx = &mut grads[i];
                for s in 0..batch {
                    for c in 0..input.channels {
                        let plane = (s * input.channels + c) * input.spatial();
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let g = dy[((s * input.channels + c) * ho + oy) * wo + ox] * share;
                                for ky in 0..*size {
                                    for kx in 0..*size {
                                        dx[plane + (oy * size + ky) * input.width + ox * size + kx] += g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            (LayerSpec::ShortcutAdd { source }, LayerCache::Plain) => {
                for (d, g) in grads[i].iter_mut().zip(&dy) {
                    *d += g;
                }
                for (d, g) in grads[*source].iter_mut().zip(&dy) {
                    *d += g;
                }
            }
            _ => {
                return Err(Error::MissingCache(format!("layer {i} ({}) has no matching cache entry", spec.kind())));
            }
        }
    }
    Ok(out)
}

/// Chains `d loss / d effective weights` back to the latent weights and `β`.
fn weight_gradient(
    state: &NetworkState,
    index: usize,
    weights: &WeightCache,
    d_eff: &[f64],
    sched: &ApproxSchedule,
    out: &mut LayerGradient,
) -> Result<()> {
    let layer = &state.layers[index];
    let Some(adjusted) = &weights.adjusted else {
        out.weights.copy_from_slice(d_eff);
        return Ok(());
    };
    let d_adjusted: Vec<f64> = if state.variant.uses_approx() {
        d_eff.iter().zip(adjusted).map(|(g, &v)| g * sched.slope(v)).collect()
    } else {
        // λ·sign(w̃) with λ = mean|w̃|: straight-through for sign, exact for λ.
        let n = adjusted.len() as f64;
        let through_lambda = d_eff.iter().zip(adjusted).map(|(g, &v)| g * sign(v)).sum::<f64>() / n;
        d_eff
            .iter()
            .zip(adjusted)
            .map(|(g, &v)| {
                let mask = if v.abs() <= 1.0 { weights.lambda } else { 0.0 };
                g * mask + sign(v) * through_lambda
            })
            .collect()
    };
    match (&layer.rotation, &weights.rotated) {
        (Some(rot), Some(rotated)) => {
            let alpha = state.alpha(index);
            let g = DenseMatrix::new(rot.n1(), rot.n2(), d_adjusted.clone())?;
            let back = rot.rotate_adjoint(&g)?;
            for ((o, &d), &b) in out.weights.iter_mut().zip(&d_adjusted).zip(back.as_slice()) {
                *o = (1.0 - alpha) * d + alpha * b;
            }
            if state.variant.uses_adjust() {
                let d_alpha: f64 = d_adjusted
                    .iter()
                    .zip(rotated.iter().zip(&layer.weights))
                    .map(|(g, (r, w))| g * (r - w))
                    .sum();
                out.beta = d_alpha * layer.adjust.dalpha_dbeta();
            }
        }
        (None, None) => out.weights.copy_from_slice(&d_adjusted),
        _ => return Err(Error::MissingCache(format!("layer {index}: rotation changed since forward"))),
    }
    Ok(())
}

fn input_gradient(spec: &LayerSpec, x: &[f64], dxb: Vec<f64>, sched: &ApproxSchedule, approx: bool, dx: &mut [f64]) {
    if spec.binarizes_input() {
        for ((d, g), &v) in dx.iter_mut().zip(&dxb).zip(x) {
            *d += g * input_slope(v, sched, approx);
        }
    } else {
        for (d, g) in dx.iter_mut().zip(&dxb) {
            *d += g;
        }
    }
}

/// Mean softmax cross-entropy, its gradient with respect to the logits, and
/// the number of correct argmax predictions.
pub fn softmax_cross_entropy(logits: &[f64], labels: &[u8], classes: usize) -> Result<(f64, Vec<f64>, usize)> {
    if classes == 0 || logits.len() != labels.len() * classes {
        return Err(Error::Shape(format!(
            "{} logits for {} labels of {classes} classes",
            logits.len(),
            labels.len()
        )));
    }
    let batch = labels.len() as f64;
    let mut loss = 0.0;
    let mut correct = 0;
    let mut grad = vec![0.0; logits.len()];
    for ((row, g), &label) in logits.chunks_exact(classes).zip(grad.chunks_exact_mut(classes)).zip(labels) {
        let label = label as usize;
        if label >= classes {
            return Err(Error::InvalidInput(format!("label {label} out of range for {classes} classes")));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += total.ln() + max - row[label];
        for (gi, v) in g.iter_mut().zip(row) {
            *gi = (v - max).exp() / total / batch;
        }
        g[label] -= 1.0 / batch;
        if argmax(row) == label {
            correct += 1;
        }
    }
    Ok((loss / batch, grad, correct))
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Folds the batch statistics of a train-mode pass into the running averages.
pub fn update_running_statistics(state: &mut NetworkState, cache: &ForwardCache, momentum: f64) {
    for (i, mean, var) in cache.batch_statistics() {
        let count = match state.arch.layers[i] {
            LayerSpec::BatchNorm { spatial, .. } => (cache.batch * spatial) as f64,
            _ => continue,
        };
        let correction = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let layer = &mut state.layers[i];
        for (r, m) in layer.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, v) in layer.running_var.iter_mut().zip(var) {
            *r = (1.0 - momentum) * *r + momentum * v * correction;
        }
    }
}
