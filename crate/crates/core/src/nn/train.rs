use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::data::{augment, batches, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{flip_rate, LayerMetrics, MetricsRecord};
use crate::nn::engine::{backward, forward, softmax_cross_entropy, update_running_statistics, Mode};
use crate::nn::spec::{Architecture, Variant};
use crate::nn::state::NetworkState;
use crate::quantize::{quantization_error, sign, ApproxSchedule, DEFAULT_T_MAX, DEFAULT_T_MIN};
use crate::rotation::{align, sign_cosine, AlignmentResult, RotationPair, WeightBlock, DEFAULT_CYCLES};
use crate::seed::{self, Purpose};

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate, decayed to `lr_min` along a cosine over all steps.
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
    /// L2 penalty on full-precision dense and convolution weights. Latent
    /// weights of binarized layers are exempt.
    pub weight_decay: f64,
    pub seed: u64,
    pub rotation_cycles: usize,
    pub variant: Variant,
    pub t_min: f64,
    pub t_max: f64,
    pub bn_momentum: f64,
    pub augment: bool,
    pub augment_pad: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 256,
            lr: 0.1,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 5e-3,
            seed: 0,
            rotation_cycles: DEFAULT_CYCLES,
            variant: Variant::BTRA,
            t_min: DEFAULT_T_MIN,
            t_max: DEFAULT_T_MAX,
            bn_momentum: 0.1,
            augment: false,
            augment_pad: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return bad("need 0 <= lr_min <= lr and lr > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.rotation_cycles == 0 {
            return bad("rotation_cycles must be at least 1");
        }
        if !(self.t_min.is_finite() && self.t_max.is_finite() && self.t_min <= self.t_max) {
            return bad("need finite t_min <= t_max");
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return bad("bn_momentum must lie in (0, 1]");
        }
        Ok(())
    }

    /// Approximation schedule after `step` of `total` optimizer steps. The
    /// exponent advances per step rather than per epoch, so the last batch
    /// trains at `t = 10^t_max`.
    pub fn schedule(&self, step: usize, total: usize) -> Result<ApproxSchedule> {
        ApproxSchedule::with_exponents(self.t_min, self.t_max, total.max(1), step.min(total.max(1)))
    }

    fn learning_rate(&self, step: usize, total: usize) -> f64 {
        let progress = if total == 0 { 0.0 } else { step as f64 / total as f64 };
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + (PI * progress).cos())
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Outcome of re-aligning one layer at an epoch boundary.
#[derive(Debug)]
pub struct RotationOutcome {
    pub layer: usize,
    pub result: Result<AlignmentResult>,
}

/// Re-aligns every rotating layer to its current latent weights, warm-started
/// from the layer's previous rotation. Layers run concurrently; a layer whose
/// alignment fails keeps its previous rotation and reports the error.
pub fn epoch_begin_rotate(state: &mut NetworkState, cycles: usize) -> Vec<RotationOutcome> {
    let jobs: Vec<(usize, Result<WeightBlock>, RotationPair)> = state
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| {
            let rot = l.rotation.clone()?;
            let block = crate::linalg::DenseMatrix::new(rot.n1(), rot.n2(), l.weights.clone()).map(|matrix| WeightBlock {
                matrix,
                original_shape: state.arch.layers[i].weight_shape().unwrap_or_default(),
                layer_id: state.arch.layer_id(i),
            });
            Some((i, block, rot))
        })
        .collect();
    let outcomes: Vec<RotationOutcome> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(i, block, rot)| {
                scope.spawn(move || RotationOutcome {
                    layer: *i,
                    result: match block {
                        Ok(b) => align(b, cycles, Some(rot)),
                        Err(e) => Err(Error::InvalidInput(format!("layer {i}: {e}"))),
                    },
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("alignment thread panicked")).collect()
    });
    for outcome in &outcomes {
        if let Ok(res) = &outcome.result {
            state.layers[outcome.layer].rotation = Some(res.rotation.clone());
        }
    }
    outcomes
}

/// `w̃` of a binarized layer under the current rotation and `α`; the latent
/// weights for layers that do not rotate.
pub fn adjusted_layer_weights(state: &NetworkState, layer: usize) -> Result<Vec<f64>> {
    let l = &state.layers[layer];
    match &l.rotation {
        Some(rot) => {
            let block = crate::linalg::DenseMatrix::new(rot.n1(), rot.n2(), l.weights.clone())?;
            let rotated = rot.rotate(&block)?.into_vec();
            let alpha = state.alpha(layer);
            Ok(l.weights.iter().zip(&rotated).map(|(&w, &r)| w + alpha * (r - w)).collect())
        }
        None => Ok(l.weights.clone()),
    }
}

/// Cosine and quantization error of the latent and adjusted weights of every
/// binarized layer, with flip rate and `α` measured at the same moment.
pub fn layer_metrics(state: &NetworkState) -> Result<Vec<LayerMetrics>> {
    state
        .arch
        .binarized_layers()
        .map(|i| {
            let l = &state.layers[i];
            let adjusted = adjusted_layer_weights(state, i)?;
            let current: Vec<f64> = adjusted.iter().map(|&v| sign(v)).collect();
            Ok(LayerMetrics {
                layer_id: state.arch.layer_id(i),
                cos_before: sign_cosine(&l.weights).unwrap_or(f64::NAN),
                cos_after: sign_cosine(&adjusted).unwrap_or(f64::NAN),
                qerr_base: quantization_error(&l.weights)?.error,
                qerr_rot: quantization_error(&adjusted)?.error,
                flip_rate: flip_rate(&l.init_signs, &current)?,
                alpha: state.alpha(i),
                weight_count: l.weights.len(),
            })
        })
        .collect()
}

/// Eval-mode mean loss and accuracy over a dataset.
pub fn evaluate(state: &NetworkState, ds: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Ok((0.0, 0.0));
    }
    let sched = ApproxSchedule::new(1, 1)?;
    let mut loss = 0.0;
    let mut correct = 0;
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (inputs, labels) = ds.gather(chunk);
        let cache = forward(state, &inputs, chunk.len(), &sched, Mode::Eval)?;
        let (l, _, c) = softmax_cross_entropy(cache.logits(), &labels, state.arch.classes)?;
        loss += l * chunk.len() as f64;
        correct += c;
    }
    Ok((loss / ds.len() as f64, correct as f64 / ds.len() as f64))
}

/// Predicted classes in eval mode.
pub fn predict(state: &NetworkState, inputs: &[f64], batch: usize) -> Result<Vec<usize>> {
    let sched = ApproxSchedule::new(1, 1)?;
    let cache = forward(state, inputs, batch, &sched, Mode::Eval)?;
    Ok(cache
        .logits()
        .chunks_exact(state.arch.classes)
        .map(crate::nn::engine::argmax)
        .collect())
}

fn first_non_finite_parameter(state: &NetworkState) -> Option<usize> {
    state.layers.iter().position(|l| {
        l.weights
            .iter()
            .chain(&l.bias)
            .chain(&l.running_var)
            .any(|v| !v.is_finite())
            || !l.adjust.beta.is_finite()
    })
}

/// Runs `config.epochs` epochs of rotation followed by minibatch SGD and
/// returns the final state with one metrics record per epoch.
pub fn train(
    arch: Architecture,
    config: &TrainConfig,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    mut on_epoch: impl FnMut(&MetricsRecord),
) -> Result<(NetworkState, Vec<MetricsRecord>)> {
    config.validate()?;
    if train_set.shape != arch.input || train_set.classes != arch.classes {
        return Err(Error::Shape(format!(
            "dataset of {} samples over {} classes does not fit {} ({} inputs, {} classes)",
            train_set.shape, train_set.classes, arch.name, arch.input, arch.classes
        )));
    }
    let mut state = NetworkState::init(arch, config.variant, config.seed);
    let mut records = Vec::with_capacity(config.epochs);
    let steps_per_epoch = train_set.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let classes = state.arch.classes;

    for epoch in 0..config.epochs {
        let before = layer_metrics(&state)?;
        if config.variant.uses_rotation() {
            // Failed layers keep their previous rotation.
            let _ = epoch_begin_rotate(&mut state, config.rotation_cycles);
        }
        let aligned = layer_metrics(&state)?;

        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut aug_rng = seed::stream(config.seed, Purpose::Augment, epoch as u64);
        for (b, idx) in batches(train_set.len(), config.batch_size, config.seed, epoch)?.iter().enumerate() {
            let (mut inputs, labels) = train_set.gather(idx);
            if config.augment {
                augment(&mut inputs, train_set.shape, config.augment_pad, &mut aug_rng);
            }
            let non_finite = |state: &NetworkState, layer: Option<usize>| Error::NonFinite {
                layer: first_non_finite_parameter(state).or(layer).unwrap_or(0),
                epoch,
                batch: b,
            };
            let step = epoch * steps_per_epoch + b;
            let sched = config.schedule(step + 1, total_steps)?;
            let cache = match forward(&state, &inputs, idx.len(), &sched, Mode::Train) {
                Ok(c) => c,
                Err(e) => return Err(if first_non_finite_parameter(&state).is_some() { non_finite(&state, None) } else { e }),
            };
            // Hard sign maps NaN to a finite value, so activations are
            // checked directly rather than through the loss.
            if let Some(layer) = cache.first_non_finite_layer() {
                return Err(Error::NonFinite { layer, epoch, batch: b });
            }
            let (loss, grad, c) = softmax_cross_entropy(cache.logits(), &labels, classes)?;
            if !loss.is_finite() {
                return Err(non_finite(&state, None));
            }
            let grads = backward(&state, &cache, &grad, &sched)?;
            update_running_statistics(&mut state, &cache, config.bn_momentum);
            let lr = config.learning_rate(step, total_steps);
            sgd_step(&mut state, &grads, lr, config);
            loss_sum += loss * idx.len() as f64;
            correct += c;
        }

        state.epoch = epoch + 1;
        let end = layer_metrics(&state)?;
        let test_acc = match test_set {
            Some(ds) => evaluate(&state, ds, 1000)?.1,
            None => f64::NAN,
        };
        let layers = before
            .into_iter()
            .zip(aligned)
            .zip(end)
            .map(|((b, a), e)| LayerMetrics {
                layer_id: b.layer_id,
                cos_before: b.cos_before,
                cos_after: a.cos_after,
                qerr_base: b.qerr_base,
                qerr_rot: a.qerr_rot,
                flip_rate: e.flip_rate,
                alpha: e.alpha,
                weight_count: b.weight_count,
            })
            .collect();
        let record = MetricsRecord {
            epoch,
            layers,
            loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            test_acc,
        };
        on_epoch(&record);
        records.push(record);
    }
    Ok((state, records))
}

fn sgd_step(state: &mut NetworkState, grads: &crate::nn::state::Gradients, lr: f64, config: &TrainConfig) {
    let mu = config.momentum;
    for (i, ((layer, vel), g)) in state
        .layers
        .iter_mut()
        .zip(&mut state.velocity.layers)
        .zip(&grads.layers)
        .enumerate()
    {
        let spec = &state.arch.layers[i];
        let decay = if spec.has_weights() && !spec.is_binarized() { config.weight_decay } else { 0.0 };
        for ((w, v), &gw) in layer.weights.iter_mut().zip(&mut vel.weights).zip(&g.weights) {
            *v = mu * *v + gw + decay * *w;
            *w -= lr * *v;
        }
        for ((b, v), &gb) in layer.bias.iter_mut().zip(&mut vel.bias).zip(&g.bias) {
            *v = mu * *v + gb;
            *b -= lr * *v;
        }
        if state.variant.uses_adjust() && layer.rotation.is_some() {
            vel.beta = mu * vel.beta + g.beta;
            layer.adjust.beta -= lr * vel.beta;
        }
    }
}
