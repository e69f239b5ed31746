//! Central-difference verification of [`backward`](crate::nn::engine::backward).

use crate::error::Result;
use crate::nn::engine::{backward, forward, softmax_cross_entropy, Mode};
use crate::nn::state::NetworkState;
use crate::quantize::ApproxSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub checked: usize,
    /// Parameters next to a kink of `F`, where the difference quotient is
    /// unstable and no comparison is made.
    pub skipped: usize,
    pub max_relative_error: f64,
    /// Parameter with the largest error, as `layer {i} {weights|bias|beta}[{j}]`.
    pub worst: Option<String>,
}

fn loss(state: &NetworkState, inputs: &[f64], labels: &[u8], sched: &ApproxSchedule) -> Result<f64> {
    let cache = forward(state, inputs, labels.len(), sched, Mode::Train)?;
    Ok(softmax_cross_entropy(cache.logits(), labels, state.arch.classes)?.0)
}

#[derive(Clone, Copy)]
enum Slot {
    Weight(usize),
    Bias(usize),
    Beta,
}

fn slot(state: &mut NetworkState, layer: usize, s: Slot) -> &mut f64 {
    let l = &mut state.layers[layer];
    match s {
        Slot::Weight(j) => &mut l.weights[j],
        Slot::Bias(j) => &mut l.bias[j],
        Slot::Beta => &mut l.adjust.beta,
    }
}

/// Compares every analytic gradient of the mean cross-entropy on one batch
/// against central differences with step `h`.
///
/// A parameter is skipped when the quotients at `h` and `h/2` disagree by more
/// than `1e-7` relative, which happens only when a perturbation crosses one of
/// `F`'s kinks. Relative errors use `max(|analytic|, |numeric|, 1e-4)` as the
/// denominator.
pub fn gradient_check(
    state: &NetworkState,
    inputs: &[f64],
    labels: &[u8],
    sched: &ApproxSchedule,
    h: f64,
) -> Result<GradientCheck> {
    let cache = forward(state, inputs, labels.len(), sched, Mode::Train)?;
    let (_, grad, _) = softmax_cross_entropy(cache.logits(), labels, state.arch.classes)?;
    let grads = backward(state, &cache, &grad, sched)?;

    let mut report = GradientCheck {
        checked: 0,
        skipped: 0,
        max_relative_error: 0.0,
        worst: None,
    };
    let mut probe = state.clone();
    let mut difference = |layer: usize, s: Slot, step: f64| -> Result<f64> {
        let base = *slot(&mut probe, layer, s);
        *slot(&mut probe, layer, s) = base + step;
        let up = loss(&probe, inputs, labels, sched)?;
        *slot(&mut probe, layer, s) = base - step;
        let down = loss(&probe, inputs, labels, sched)?;
        *slot(&mut probe, layer, s) = base;
        Ok((up - down) / (2.0 * step))
    };

    for (i, layer) in state.layers.iter().enumerate() {
        let mut slots: Vec<(Slot, f64, String)> = Vec::new();
        slots.extend((0..layer.weights.len()).map(|j| (Slot::Weight(j), grads.layers[i].weights[j], format!("layer {i} weights[{j}]"))));
        slots.extend((0..layer.bias.len()).map(|j| (Slot::Bias(j), grads.layers[i].bias[j], format!("layer {i} bias[{j}]"))));
        if layer.rotation.is_some() && state.variant.uses_adjust() {
            slots.push((Slot::Beta, grads.layers[i].beta, format!("layer {i} beta")));
        }
        for (s, analytic, name) in slots {
            let coarse = difference(i, s, h)?;
            let fine = difference(i, s, h / 2.0)?;
            if (coarse - fine).abs() > 1e-7 * coarse.abs().max(1e-2) {
                report.skipped += 1;
                continue;
            }
            report.checked += 1;
            let rel = (analytic - fine).abs() / analytic.abs().max(fine.abs()).max(1e-4);
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some(name);
            }
        }
    }
    Ok(report)
}
