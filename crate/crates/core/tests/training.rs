use std::path::PathBuf;

use birotate::data::{load_mnist, synthetic_classification, Dataset, Normalization, Split};
use birotate::metrics::{central_mass, metrics_csv};
use birotate::nn::{epoch_begin_rotate, evaluate, layer_metrics, train, Architecture, NetworkState, Shape3, TrainConfig, Variant};
use birotate::linalg::{matmul, matmul_a_bt, DenseMatrix};
use birotate::quantize::sign;
use birotate::Error;

fn toy_arch() -> Architecture {
    Architecture::parse("mlp:10-32-32-3", Shape3::flat(10), 3).unwrap()
}

fn toy_data() -> Dataset {
    synthetic_classification(200, 10, 3, 1.0, 4).unwrap()
}

fn config(variant: Variant, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 20,
        lr: 0.05,
        weight_decay: 1e-4,
        seed: 3,
        variant,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_returns_the_initial_state() {
    let cfg = config(Variant::BTRA, 0);
    let (state, records) = train(toy_arch(), &cfg, &toy_data(), None, |_| {}).unwrap();
    assert!(records.is_empty());
    assert_eq!(state, NetworkState::init(toy_arch(), Variant::BTRA, cfg.seed));
}

#[test]
fn separable_data_is_fit() {
    let arch = Architecture::parse("mlp:10-128-128-3", Shape3::flat(10), 3).unwrap();
    let data = toy_data();
    for variant in Variant::ALL {
        let cfg = TrainConfig { lr: 0.3, ..config(variant, 20) };
        let mut seen = 0;
        let (state, records) = train(arch.clone(), &cfg, &data, None, |_| seen += 1).unwrap();
        assert_eq!(seen, 20);
        assert!(records.last().unwrap().loss.is_finite());
        let (_, acc) = evaluate(&state, &data, 64).unwrap();
        assert!(acc >= 0.99, "{variant:?}: train accuracy {acc}");
    }
}

#[test]
fn training_is_deterministic() {
    let data = toy_data();
    let run = || {
        let (state, records) = train(toy_arch(), &config(Variant::BTRA, 3), &data, Some(&data), |_| {}).unwrap();
        (state, metrics_csv(&records))
    };
    let (a, csv_a) = run();
    let (b, csv_b) = run();
    assert_eq!(csv_a, csv_b);
    assert_eq!(a, b);
}

#[test]
fn non_finite_input_aborts_with_a_diagnostic() {
    let mut data = toy_data();
    data.images[25] = f32::NAN;
    let err = train(toy_arch(), &config(Variant::BTRA, 2), &data, None, |_| {}).unwrap_err();
    match err {
        Error::NonFinite { layer, epoch, .. } => {
            assert_eq!(layer, 0);
            assert_eq!(epoch, 0);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn mismatched_dataset_is_rejected() {
    let data = synthetic_classification(20, 4, 3, 0.0, 1).unwrap();
    assert!(matches!(train(toy_arch(), &config(Variant::B, 1), &data, None, |_| {}), Err(Error::Shape(_))));
}

#[test]
fn rotation_hook_behaviour() {
    // No-op without rotation.
    let mut state = NetworkState::init(toy_arch(), Variant::BT, 1);
    let before = state.clone();
    assert!(epoch_begin_rotate(&mut state, 3).is_empty());
    assert_eq!(state, before);

    // Cosine never drops, and latent weights are untouched.
    let mut state = NetworkState::init(toy_arch(), Variant::BTRA, 1);
    let weights = state.layers[2].weights.clone();
    let start = layer_metrics(&state).unwrap();
    let outcomes = epoch_begin_rotate(&mut state, 3);
    assert_eq!(outcomes.len(), 1);
    assert!(outcomes.iter().all(|o| o.result.is_ok()));
    assert_eq!(state.layers[2].weights, weights);
    let aligned = layer_metrics(&state).unwrap();
    for (s, a) in start.iter().zip(&aligned) {
        assert!(a.cos_after >= s.cos_after - 1e-12, "{}: {} < {}", a.layer_id, a.cos_after, s.cos_after);
        assert!(a.cos_after >= a.cos_before);
    }

    // Weights sitting exactly at an optimum, W = R1·B·R2ᵀ, are a fixed point.
    let rot = state.layers[2].rotation.clone().unwrap();
    let signs: Vec<f64> = birotate::data::synthetic_gaussian_weights(1024, 5).iter().map(|&v| sign(v)).collect();
    let b = DenseMatrix::new(32, 32, signs).unwrap();
    let w = matmul_a_bt(&matmul(&rot.r1, &b).unwrap(), &rot.r2);
    state.layers[2].weights = w.into_vec();
    epoch_begin_rotate(&mut state, 3);
    let again = state.layers[2].rotation.clone().unwrap();
    assert!(rot.r1.max_abs_diff(&again.r1) < 1e-8);
    assert!(rot.r2.max_abs_diff(&again.r2) < 1e-8);
}

#[test]
fn metrics_records_are_well_formed() {
    let data = toy_data();
    let (_, records) = train(toy_arch(), &config(Variant::BTRA, 2), &data, Some(&data), |_| {}).unwrap();
    assert_eq!(records.len(), 2);
    for r in &records {
        assert_eq!(r.layers.len(), 1);
        let l = &r.layers[0];
        assert_eq!(l.layer_id, "dense2");
        assert!((-1.0..=1.0).contains(&l.cos_before) && (-1.0..=1.0).contains(&l.cos_after));
        assert!((0.0..=1.0).contains(&l.flip_rate));
        assert!(l.qerr_base >= 0.0 && l.qerr_rot >= 0.0);
        assert!(l.cos_after >= l.cos_before);
        assert!((0.0..=1.0).contains(&r.test_acc));
    }
    let csv = metrics_csv(&records);
    assert_eq!(csv.lines().count(), 1 + 2);
}

#[test]
fn rotated_weights_are_more_bimodal_than_the_baseline() {
    let data = toy_data();
    let adjusted = |variant| {
        let (state, _) = train(toy_arch(), &config(variant, 5), &data, None, |_| {}).unwrap();
        let w = birotate::nn::train::adjusted_layer_weights(&state, 2).unwrap();
        let scale = w.iter().map(|v| v.abs()).sum::<f64>() / w.len() as f64;
        w.iter().map(|v| v / scale).collect::<Vec<_>>()
    };
    let rbnn = central_mass(&adjusted(Variant::BTRA), 0.25);
    let base = central_mass(&adjusted(Variant::B), 0.25);
    assert!(rbnn < base, "central mass rbnn {rbnn} vs baseline {base}");
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("BIROTATE_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

#[test]
fn mnist_headers_when_present() {
    let dir = mnist_dir();
    if !dir.join("train-images-idx3-ubyte").exists() {
        eprintln!("MNIST not found under {}; skipping", dir.display());
        return;
    }
    let train_set = load_mnist(&dir, Split::Train, &Normalization::mnist()).unwrap();
    assert_eq!(train_set.len(), 60_000);
    assert_eq!(train_set.shape, Shape3::new(1, 28, 28));
    let test_set = load_mnist(&dir, Split::Test, &Normalization::mnist()).unwrap();
    assert_eq!(test_set.len(), 10_000);
    assert_eq!(test_set.split, Split::Test);
    let mean = train_set.images.iter().map(|&v| v as f64).sum::<f64>() / train_set.images.len() as f64;
    assert!(mean.abs() < 0.01, "normalized mean {mean}");
}
