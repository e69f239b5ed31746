use std::f64::consts::{FRAC_PI_2, SQRT_2};

use birotate::linalg::random_gaussian;
use birotate::nn::{backward, forward, softmax_cross_entropy, Architecture, LayerSpec, Mode, NetworkState, Shape3, Variant};
use birotate::quantize::ApproxSchedule;
use birotate::rotation::RotationPair;
use rand::Rng;

fn arch(dims: &str) -> Architecture {
    let input: usize = dims.split('-').next().unwrap().parse().unwrap();
    let classes: usize = dims.rsplit('-').next().unwrap().parse().unwrap();
    Architecture::parse(&format!("mlp:{dims}"), Shape3::flat(input), classes).unwrap()
}

/// Random batch-norm affine parameters and running statistics, so the oracle
/// exercises every term.
fn perturb_norms(state: &mut NetworkState, seed: u64) {
    let mut rng = birotate::seed::stream(seed, birotate::seed::Purpose::Synthetic, 99);
    for (spec, layer) in state.arch.layers.clone().iter().zip(&mut state.layers) {
        if let LayerSpec::BatchNorm { .. } = spec {
            for v in &mut layer.weights {
                *v = rng.random_range(0.5..1.5);
            }
            for v in &mut layer.bias {
                *v = rng.random_range(-0.3..0.3);
            }
            for v in &mut layer.running_mean {
                *v = rng.random_range(-0.5..0.5);
            }
            for v in &mut layer.running_var {
                *v = rng.random_range(0.5..2.0);
            }
        } else {
            for v in &mut layer.bias {
                *v = rng.random_range(-0.2..0.2);
            }
        }
    }
}

fn inputs(batch: usize, features: usize, seed: u64) -> Vec<f64> {
    random_gaussian(batch, features, seed).into_vec()
}

// Straight-line reference implementation over Vec<Vec<f64>> rows.

fn sgn(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn f_approx(x: f64, t: f64) -> f64 {
    let k = (1.0 / t).max(1.0);
    if x.abs() < SQRT_2 / t {
        k * (-sgn(x) * t * t * x * x / 2.0 + SQRT_2 * t * x)
    } else {
        k * sgn(x)
    }
}

fn dense_ref(x: &[Vec<f64>], w: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
    let n_out = b.len();
    let n_in = x[0].len();
    x.iter()
        .map(|row| {
            (0..n_out)
                .map(|j| {
                    let mut acc = b[j];
                    for k in 0..n_in {
                        acc += row[k] * w[j * n_in + k];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn bn_ref(x: &[Vec<f64>], gamma: &[f64], beta: &[f64], stats: Option<(&[f64], &[f64])>) -> Vec<Vec<f64>> {
    let n = x.len() as f64;
    let c = gamma.len();
    let (mean, var): (Vec<f64>, Vec<f64>) = match stats {
        Some((m, v)) => (m.to_vec(), v.to_vec()),
        None => {
            let mean: Vec<f64> = (0..c).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
            let var = (0..c).map(|j| x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).collect();
            (mean, var)
        }
    };
    x.iter()
        .map(|r| (0..c).map(|j| gamma[j] * (r[j] - mean[j]) / (var[j] + 1e-5).sqrt() + beta[j]).collect())
        .collect()
}

fn rotate_ref(w: &[f64], rot: &RotationPair) -> Vec<f64> {
    let (n1, n2) = (rot.n1(), rot.n2());
    let mut out = vec![0.0; n1 * n2];
    for a in 0..n1 {
        for b in 0..n2 {
            let mut acc = 0.0;
            for i in 0..n1 {
                for j in 0..n2 {
                    acc += rot.r1.get(i, a) * w[i * n2 + j] * rot.r2.get(j, b);
                }
            }
            out[a * n2 + b] = acc;
        }
    }
    out
}

fn rows(flat: &[f64], width: usize) -> Vec<Vec<f64>> {
    flat.chunks_exact(width).map(<[f64]>::to_vec).collect()
}

/// Reference logits for `mlp:a-b-c-d` under any variant.
fn oracle(state: &NetworkState, x: &[f64], t: f64, train: bool) -> Vec<f64> {
    let l = &state.layers;
    let features = state.arch.input.len();
    let approx = state.variant.uses_approx();
    let binarize = |v: f64| if train && approx { f_approx(v, t) } else { sgn(v) };
    let stats = |i: usize| (!train).then(|| (l[i].running_mean.as_slice(), l[i].running_var.as_slice()));

    let h = dense_ref(&rows(x, features), &l[0].weights, &l[0].bias);
    let h = bn_ref(&h, &l[1].weights, &l[1].bias, stats(1));
    let h: Vec<Vec<f64>> = h.iter().map(|r| r.iter().map(|&v| binarize(v)).collect()).collect();

    let w = &l[2].weights;
    let adjusted: Vec<f64> = match &l[2].rotation {
        Some(rot) => {
            let alpha = state.alpha(2);
            let r = rotate_ref(w, rot);
            w.iter().zip(&r).map(|(a, b)| (1.0 - alpha) * a + alpha * b).collect()
        }
        None => w.clone(),
    };
    let effective: Vec<f64> = if approx {
        adjusted.iter().map(|&v| binarize(v)).collect()
    } else {
        let lambda = adjusted.iter().map(|v| v.abs()).sum::<f64>() / adjusted.len() as f64;
        adjusted.iter().map(|&v| lambda * sgn(v)).collect()
    };
    let h = dense_ref(&h, &effective, &l[2].bias);
    let h = bn_ref(&h, &l[3].weights, &l[3].bias, stats(3));
    let h: Vec<Vec<f64>> = h.iter().map(|r| r.iter().map(|&v| binarize(v)).collect()).collect();
    dense_ref(&h, &l[4].weights, &l[4].bias).concat()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn forward_matches_reference_in_every_variant_and_mode() {
    for variant in Variant::ALL {
        for (e, total) in [(0, 2), (1, 2), (2, 2)] {
            let mut state = NetworkState::init(arch("5-6-4-3"), variant, 11);
            state.layers[2].adjust.beta = 0.7;
            perturb_norms(&mut state, 3);
            let x = inputs(7, 5, 5);
            let sched = ApproxSchedule::new(total, e).unwrap();
            for (mode, train) in [(Mode::Train, true), (Mode::Eval, false)] {
                let cache = forward(&state, &x, 7, &sched, mode).unwrap();
                let want = oracle(&state, &x, sched.t(), train);
                let gap = max_diff(cache.logits(), &want);
                assert!(gap < 1e-9, "{variant:?} e={e} {mode:?}: gap {gap}");
            }
        }
    }
}

#[test]
fn all_positive_dense_layer_sums_rows() {
    let layers = vec![
        LayerSpec::Dense { inputs: 3, outputs: 4, binarized: false, binary_input: false },
        LayerSpec::Dense { inputs: 4, outputs: 5, binarized: true, binary_input: true },
        LayerSpec::Dense { inputs: 5, outputs: 2, binarized: false, binary_input: false },
    ];
    let arch = Architecture::new("custom", Shape3::flat(3), 2, layers).unwrap();
    let mut state = NetworkState::init(arch, Variant::BT, 1);
    state.layers[0].weights = vec![1.0; 12];
    state.layers[1].weights = vec![0.3; 20];
    state.layers[2].weights = vec![1.0; 10];
    let sched = ApproxSchedule::new(1, 1).unwrap();
    let cache = forward(&state, &[0.5, 1.0, 2.0], 1, &sched, Mode::Eval).unwrap();
    assert_eq!(cache.activation(2), &[4.0; 5]);
    assert_eq!(cache.logits(), &[20.0, 20.0]);
}

#[test]
fn forward_rejects_bad_input_and_backward_rejects_eval_cache() {
    let state = NetworkState::init(arch("4-3-3-2"), Variant::BTRA, 0);
    let sched = ApproxSchedule::new(2, 1).unwrap();
    assert!(forward(&state, &[0.0; 7], 2, &sched, Mode::Train).is_err());
    let cache = forward(&state, &[0.1; 8], 2, &sched, Mode::Eval).unwrap();
    let err = backward(&state, &cache, &[0.0; 4], &sched).unwrap_err();
    assert!(matches!(err, birotate::Error::MissingCache(_)));
    let other = NetworkState::init(arch("4-5-3-2"), Variant::BTRA, 0);
    let cache = forward(&other, &[0.1; 8], 2, &sched, Mode::Train).unwrap();
    assert!(matches!(backward(&state, &cache, &[0.0; 4], &sched), Err(birotate::Error::MissingCache(_))));
}

fn loss(state: &NetworkState, x: &[f64], labels: &[u8], sched: &ApproxSchedule) -> f64 {
    let cache = forward(state, x, labels.len(), sched, Mode::Train).unwrap();
    softmax_cross_entropy(cache.logits(), labels, state.arch.classes).unwrap().0
}

#[derive(Clone, Copy)]
enum Param {
    Weight(usize, usize),
    Bias(usize, usize),
    Beta(usize),
}

fn get(state: &mut NetworkState, p: Param) -> &mut f64 {
    match p {
        Param::Weight(l, i) => &mut state.layers[l].weights[i],
        Param::Bias(l, i) => &mut state.layers[l].bias[i],
        Param::Beta(l) => &mut state.layers[l].adjust.beta,
    }
}

fn central_difference(state: &NetworkState, p: Param, h: f64, x: &[f64], labels: &[u8], sched: &ApproxSchedule) -> f64 {
    let mut s = state.clone();
    let base = *get(&mut s, p);
    *get(&mut s, p) = base + h;
    let up = loss(&s, x, labels, sched);
    *get(&mut s, p) = base - h;
    let down = loss(&s, x, labels, sched);
    (up - down) / (2.0 * h)
}

/// Checks every parameter against central differences (step 1e-5). A
/// parameter whose difference quotient changes between steps `h` and `h/2`
/// sits next to a kink of `F` and is skipped; the count of skips is returned.
fn check_gradients(state: &NetworkState, sched: &ApproxSchedule) -> (usize, usize) {
    let x = inputs(6, state.arch.input.len(), 21);
    let labels: Vec<u8> = (0..6).map(|i| (i % state.arch.classes) as u8).collect();
    let cache = forward(state, &x, 6, sched, Mode::Train).unwrap();
    let (_, grad, _) = softmax_cross_entropy(cache.logits(), &labels, state.arch.classes).unwrap();
    let grads = backward(state, &cache, &grad, sched).unwrap();

    let mut params = Vec::new();
    for (l, layer) in state.layers.iter().enumerate() {
        params.extend((0..layer.weights.len()).map(|i| (Param::Weight(l, i), grads.layers[l].weights[i])));
        params.extend((0..layer.bias.len()).map(|i| (Param::Bias(l, i), grads.layers[l].bias[i])));
        if layer.rotation.is_some() && state.variant.uses_adjust() {
            params.push((Param::Beta(l), grads.layers[l].beta));
        }
    }
    let (mut checked, mut skipped) = (0, 0);
    for (p, analytic) in params {
        let h = 1e-5;
        let coarse = central_difference(state, p, h, &x, &labels, sched);
        let fine = central_difference(state, p, h / 2.0, &x, &labels, sched);
        if (coarse - fine).abs() > 1e-7 * coarse.abs().max(1e-2) {
            skipped += 1;
            continue;
        }
        let rel = (analytic - fine).abs() / analytic.abs().max(fine.abs()).max(1e-4);
        assert!(rel < 1e-4, "{:?} at t={}: analytic {analytic}, numeric {fine}", describe(p), sched.t());
        checked += 1;
    }
    (checked, skipped)
}

fn describe(p: Param) -> String {
    match p {
        Param::Weight(l, i) => format!("layer {l} weight {i}"),
        Param::Bias(l, i) => format!("layer {l} bias {i}"),
        Param::Beta(l) => format!("layer {l} beta"),
    }
}

#[test]
fn gradients_match_finite_differences() {
    for variant in [Variant::BT, Variant::BTR, Variant::BTRA] {
        for e in [0, 1, 2] {
            let mut state = NetworkState::init(arch("5-6-4-3"), variant, 7);
            state.layers[2].adjust.beta = 1.0;
            perturb_norms(&mut state, 8);
            // Bring the binarized layer's weights into the curved part of F.
            for w in &mut state.layers[2].weights {
                *w *= 0.1;
            }
            let sched = ApproxSchedule::new(2, e).unwrap();
            let (checked, skipped) = check_gradients(&state, &sched);
            assert!(checked >= 4 * (checked + skipped) / 5, "{variant:?} e={e}: {skipped} of {} skipped", checked + skipped);
        }
    }
}

#[test]
fn beta_gradient_matches_away_from_the_stationary_start() {
    let mut state = NetworkState::init(arch("5-6-4-3"), Variant::BTRA, 2);
    let sched = ApproxSchedule::new(2, 1).unwrap();
    let x = inputs(6, 5, 4);
    let labels = [0u8, 1, 2, 0, 1, 2];
    for beta in [0.3, 1.0, 2.5, FRAC_PI_2] {
        state.layers[2].adjust.beta = beta;
        let cache = forward(&state, &x, 6, &sched, Mode::Train).unwrap();
        let (_, grad, _) = softmax_cross_entropy(cache.logits(), &labels, 3).unwrap();
        let g = backward(&state, &cache, &grad, &sched).unwrap().layers[2].beta;
        let numeric = central_difference(&state, Param::Beta(2), 1e-6, &x, &labels, &sched);
        assert!((g - numeric).abs() < 1e-6 * g.abs().max(1e-2), "beta {beta}: {g} vs {numeric}");
        if beta == FRAC_PI_2 {
            assert!(g.abs() < 1e-12);
        }
    }
}

fn logits_and_grads(state: &NetworkState, sched: &ApproxSchedule) -> (Vec<f64>, Vec<Vec<f64>>) {
    let x = inputs(5, 5, 17);
    let labels = [0u8, 1, 2, 1, 0];
    let cache = forward(state, &x, 5, sched, Mode::Train).unwrap();
    let (_, grad, _) = softmax_cross_entropy(cache.logits(), &labels, 3).unwrap();
    let grads = backward(state, &cache, &grad, sched).unwrap();
    (cache.logits().to_vec(), grads.layers.into_iter().map(|l| l.weights).collect())
}

#[test]
fn adjustment_endpoints_reduce_to_the_plain_layer() {
    let sched = ApproxSchedule::new(4, 2).unwrap();
    let plain = NetworkState::init(arch("5-6-4-3"), Variant::BT, 3);
    let (want_logits, want_grads) = logits_and_grads(&plain, &sched);

    // α = 0: the rotation is ignored.
    let mut zero = NetworkState::init(arch("5-6-4-3"), Variant::BTRA, 3);
    zero.layers[2].adjust.beta = 0.0;
    assert_eq!(zero.alpha(2), 0.0);
    let (logits, grads) = logits_and_grads(&zero, &sched);
    assert!(max_diff(&logits, &want_logits) < 1e-12);
    for (g, w) in grads.iter().zip(&want_grads) {
        assert!(max_diff(g, w) < 1e-12);
    }

    // α = 1 with identity rotations.
    let mut ident = NetworkState::init(arch("5-6-4-3"), Variant::BTRA, 3);
    ident.layers[2].rotation = Some(RotationPair::identity(4, 6));
    assert_eq!(ident.alpha(2), 1.0);
    let (logits, grads) = logits_and_grads(&ident, &sched);
    assert!(max_diff(&logits, &want_logits) < 1e-12);
    for (g, w) in grads.iter().zip(&want_grads) {
        assert!(max_diff(g, w) < 1e-12);
    }
}

#[test]
fn train_logits_approach_eval_logits_as_the_schedule_advances() {
    // No batch norm, so both modes see identical statistics and the only
    // difference is F against sign.
    let layers = vec![
        LayerSpec::Dense { inputs: 8, outputs: 16, binarized: false, binary_input: false },
        LayerSpec::Dense { inputs: 16, outputs: 16, binarized: true, binary_input: true },
        LayerSpec::Dense { inputs: 16, outputs: 4, binarized: false, binary_input: true },
    ];
    let arch = Architecture::new("no-norm", Shape3::flat(8), 4, layers).unwrap();
    for variant in [Variant::BT, Variant::BTRA] {
        let state = NetworkState::init(arch.clone(), variant, 5);
        let x = inputs(64, 8, 6);
        let mut previous = f64::INFINITY;
        for e in [2, 3, 4] {
            let sched = ApproxSchedule::new(4, e).unwrap();
            let train = forward(&state, &x, 64, &sched, Mode::Train).unwrap();
            let eval = forward(&state, &x, 64, &sched, Mode::Eval).unwrap();
            let gap = max_diff(train.logits(), eval.logits());
            assert!(gap < previous, "{variant:?} e={e}: gap {gap} after {previous}");
            previous = gap;
        }
    }
}
