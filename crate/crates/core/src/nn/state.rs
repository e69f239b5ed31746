use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::random_orthogonal;
use crate::nn::spec::{Architecture, LayerSpec, Variant};
use crate::quantize::{sign, AdjustState};
use crate::rotation::{balanced_factorization, RotationPair};
use crate::seed::{self, Purpose};

/// Trainable and running quantities of one layer.
///
/// Dense and convolution layers keep their latent weights in `weights` and
/// `bias`; batch norm keeps its scale in `weights`, its shift in `bias` and
/// its running statistics in `running_mean`/`running_var`. Parameter-free
/// layers leave every vector empty.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub rotation: Option<RotationPair>,
    pub adjust: AdjustState,
    /// `sign(w)` at initialization, kept for flip-rate measurement.
    pub init_signs: Vec<f64>,
}

impl LayerState {
    fn empty() -> Self {
        Self {
            weights: Vec::new(),
            bias: Vec::new(),
            running_mean: Vec::new(),
            running_var: Vec::new(),
            rotation: None,
            adjust: AdjustState::default(),
            init_signs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub arch: Architecture,
    pub variant: Variant,
    pub layers: Vec<LayerState>,
    pub velocity: Gradients,
    /// Completed training epochs.
    pub epoch: usize,
}

/// Gradients (or momentum buffers) mirroring the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerGradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub beta: f64,
}

impl Gradients {
    pub fn zeros_like(layers: &[LayerState]) -> Self {
        Self {
            layers: layers
                .iter()
                .map(|l| LayerGradient {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                    beta: 0.0,
                })
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).chain(std::iter::once(&l.beta)))
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

impl NetworkState {
    /// He-normal weights for full-precision layers, unit-variance latent
    /// weights for binarized ones, zero biases, unit batch-norm scale. Layers
    /// that rotate start from a seeded Haar-random pair.
    pub fn init(arch: Architecture, variant: Variant, seed: u64) -> Self {
        let mut layers = Vec::with_capacity(arch.layers.len());
        for (i, spec) in arch.layers.iter().enumerate() {
            let mut state = LayerState::empty();
            match spec {
                LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => {
                    let n: usize = spec.weight_shape().expect("weighted layer").iter().product();
                    let std = if spec.is_binarized() { 1.0 } else { (2.0 / spec.fan_in() as f64).sqrt() };
                    let normal = Normal::new(0.0, std).expect("positive std");
                    let mut rng = seed::stream(seed, Purpose::Init, i as u64);
                    state.weights = (0..n).map(|_| normal.sample(&mut rng)).collect();
                    state.bias = vec![0.0; spec.bias_len()];
                    if spec.is_binarized() {
                        state.init_signs = state.weights.iter().map(|&w| sign(w)).collect();
                        if variant.uses_rotation() {
                            let (n1, n2) = balanced_factorization(n);
                            let r1 = random_orthogonal(n1, seed::derive(seed, Purpose::Rotation, 2 * i as u64));
                            let r2 = random_orthogonal(n2, seed::derive(seed, Purpose::Rotation, 2 * i as u64 + 1));
                            state.rotation = Some(RotationPair { r1, r2 });
                        }
                    }
                }
                LayerSpec::BatchNorm { channels, .. } => {
                    state.weights = vec![1.0; *channels];
                    state.bias = vec![0.0; *channels];
                    state.running_mean = vec![0.0; *channels];
                    state.running_var = vec![1.0; *channels];
                }
                LayerSpec::Pool { .. } | LayerSpec::ShortcutAdd { .. } => {}
            }
            layers.push(state);
        }
        let velocity = Gradients::zeros_like(&layers);
        Self {
            arch,
            variant,
            layers,
            velocity,
            epoch: 0,
        }
    }

    /// Checks the structural invariants: parameter lengths match the layer
    /// specs and rotations sit only on binarized layers of rotating variants.
    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != self.arch.layers.len() {
            return Err(Error::Shape(format!(
                "{} layer states for {} layers",
                self.layers.len(),
                self.arch.layers.len()
            )));
        }
        for (i, (spec, state)) in self.arch.layers.iter().zip(&self.layers).enumerate() {
            let (w, b, stats) = match spec {
                LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => {
                    (spec.weight_shape().map_or(0, |s| s.iter().product()), spec.bias_len(), 0)
                }
                LayerSpec::BatchNorm { channels, .. } => (*channels, *channels, *channels),
                _ => (0, 0, 0),
            };
            let signs = if spec.is_binarized() { w } else { 0 };
            if state.weights.len() != w
                || state.bias.len() != b
                || state.running_mean.len() != stats
                || state.running_var.len() != stats
                || state.init_signs.len() != signs
            {
                return Err(Error::Shape(format!("layer {i} ({}): parameter lengths do not match", spec.kind())));
            }
            let wants_rotation = spec.is_binarized() && self.variant.uses_rotation();
            match (&state.rotation, wants_rotation) {
                (Some(rot), true) => {
                    if (rot.n1(), rot.n2()) != balanced_factorization(w) {
                        return Err(Error::Shape(format!("layer {i}: rotation does not fit {w} weights")));
                    }
                }
                (None, false) => {}
                (Some(_), false) => {
                    return Err(Error::InvalidInput(format!("layer {i}: unexpected rotation")));
                }
                (None, true) => {
                    return Err(Error::InvalidInput(format!("layer {i}: missing rotation")));
                }
            }
        }
        Ok(())
    }

    /// Per-layer `α`, 1 for rotating variants without adjustment and 0 when
    /// the layer does not rotate.
    pub fn alpha(&self, layer: usize) -> f64 {
        if self.layers[layer].rotation.is_none() {
            0.0
        } else if self.variant.uses_adjust() {
            self.layers[layer].adjust.alpha()
        } else {
            1.0
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::Shape3;

    fn arch() -> Architecture {
        Architecture::parse("mlp:12-8-6-3", Shape3::flat(12), 3).unwrap()
    }

    #[test]
    fn init_layout() {
        let state = NetworkState::init(arch(), Variant::BTRA, 1);
        state.validate().unwrap();
        assert_eq!(state.layers[0].weights.len(), 96);
        assert!(state.layers[0].rotation.is_none());
        let rot = state.layers[2].rotation.as_ref().unwrap();
        assert_eq!((rot.n1(), rot.n2()), (6, 8));
        assert!(rot.orthogonality_error() < 1e-12);
        assert_eq!(state.layers[1].weights, vec![1.0; 8]);
        assert_eq!(state.alpha(2), 1.0);
        assert_eq!(state.alpha(0), 0.0);
    }

    #[test]
    fn init_is_seeded() {
        let a = NetworkState::init(arch(), Variant::B, 5);
        let b = NetworkState::init(arch(), Variant::B, 5);
        let c = NetworkState::init(arch(), Variant::B, 6);
        assert_eq!(a, b);
        assert_ne!(a.layers[0].weights, c.layers[0].weights);
        assert!(a.layers[2].rotation.is_none());
    }

    #[test]
    fn validation_rejects_tampering() {
        let mut state = NetworkState::init(arch(), Variant::BT, 1);
        state.layers[2].rotation = Some(RotationPair::identity(6, 8));
        assert!(state.validate().is_err());
        let mut state = NetworkState::init(arch(), Variant::BT, 1);
        state.layers[0].weights.pop();
        assert!(state.validate().is_err());
    }
}
