use cascade_ct::cascade::{
    build_hybrid_spec, build_wu_spec, initial_weights, load_model, save_model, train_cascade, train_level,
    CascadeLevelSpec, CascadeModel, InputRule, LabelRule, LevelData, OutputRule, TrainConfig, TrainHistory,
    TrainedLevel, TrainingSet,
};
use cascade_ct::image::{ImageSlice, Unit};
use cascade_ct::losses::LossConfig;
use cascade_ct::network::{build_cnn10, build_drl, LayerSpec, NetworkSpec};
use cascade_ct::tensor::Tensor;
use cascade_ct::weights::{WeightEntry, WeightStore};
use cascade_ct::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One 3x3 convolution whose only nonzero weight is the center tap.
fn center_tap(value: f32) -> (NetworkSpec, WeightStore) {
    let spec = NetworkSpec {
        name: "tap".into(),
        input_channels: 1,
        layers: vec![LayerSpec::conv(1, 1, 1)],
        global_residual: false,
    };
    let mut kernel = vec![0.0; 9];
    kernel[4] = value;
    let store = WeightStore::new(vec![
        WeightEntry::new("layer00.conv.kernel", vec![1, 1, 3, 3], kernel).unwrap(),
        WeightEntry::new("layer00.conv.bias", vec![1], vec![0.0]).unwrap(),
    ])
    .unwrap();
    (spec, store)
}

fn level(network: NetworkSpec, weights: WeightStore, first: bool) -> TrainedLevel {
    let (input_rule, label_rule, output_rule) = if first {
        (InputRule::Ldct, LabelRule::Ndct, OutputRule::Direct)
    } else {
        (
            InputRule::PrevPrediction,
            LabelRule::ResidualPrevMinusNdct,
            OutputRule::SubtractResidual,
        )
    };
    TrainedLevel {
        spec: CascadeLevelSpec {
            network,
            loss: LossConfig::mse(),
            input_rule,
            label_rule,
            output_rule,
        },
        weights,
        train: TrainConfig::default(),
        history: TrainHistory::default(),
        input_digest: String::new(),
    }
}

fn random_slice(side: usize, seed: u64) -> ImageSlice {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = (0..side * side).map(|_| rng.random_range(0.0f32..1.0)).collect();
    ImageSlice::new(side, side, px, Unit::Normalized, format!("r{seed}")).unwrap()
}

fn zeros_of(spec: &NetworkSpec) -> WeightStore {
    let mut store = spec.init_weights(0);
    let names: Vec<String> = store.entries().iter().map(|e| e.name.clone()).collect();
    for n in names {
        store.get_mut(&n).unwrap().data.iter_mut().for_each(|v| *v = 0.0);
    }
    store
}

#[test]
fn oracle_second_level_recovers_target_bitwise() {
    // level 1 passes the LDCT through, so the estimate is Y_hat = x; the target
    // is Y = x / 2, and the oracle emits Y_hat - Y = Y_hat / 2.
    let (s1, w1) = center_tap(1.0);
    let (s2, w2) = center_tap(0.5);
    let model = CascadeModel::new(vec![level(s1, w1, true), level(s2, w2, false)]).unwrap();
    let x = random_slice(24, 1);
    let levels = model.predict_levels(&x).unwrap();
    assert_eq!(levels[0].pixels(), x.pixels());
    let target: Vec<f32> = x.pixels().iter().map(|v| v * 0.5).collect();
    assert_eq!(levels[1].pixels(), &target[..]);
}

#[test]
fn zero_second_level_returns_first_level_bitwise() {
    let first = {
        let mut s = build_drl(1);
        s.global_residual = true;
        s
    };
    let w1 = first.init_weights(3);
    let second = build_drl(1);
    let w2 = zeros_of(&second);
    let model = CascadeModel::new(vec![level(first.clone(), w1.clone(), true), level(second, w2, false)]).unwrap();
    let x = random_slice(40, 2);
    let both = model
        .predict_levels_tensor(&cascade_ct::network::images_to_tensor(&[&x]).unwrap())
        .unwrap();
    assert_eq!(both[0].data(), both[1].data());
    let alone = CascadeModel::new(vec![level(first, w1, true)]).unwrap();
    assert_eq!(alone.predict(&x).unwrap(), model.predict(&x).unwrap());
}

#[test]
fn rejects_inputs_below_receptive_field() {
    let spec = build_drl(1);
    let model = CascadeModel::new(vec![level(spec.clone(), spec.init_weights(0), true)]).unwrap();
    assert_eq!(model.min_input_size(), 18);
    assert!(matches!(model.predict(&random_slice(17, 0)), Err(Error::Shape(_))));
    assert!(model.predict(&random_slice(18, 0)).is_ok());
}

#[test]
fn full_image_matches_patchwise_away_from_borders() {
    let spec = build_drl(1);
    let model = CascadeModel::new(vec![level(spec.clone(), spec.init_weights(11), true)]).unwrap();
    let full_in = random_slice(96, 4);
    let full = model.predict(&full_in).unwrap();
    let margin = spec.receptive_field() / 2;
    for (r, c) in [(0, 0), (16, 32), (32, 32)] {
        let crop = model.predict(&full_in.crop(r, c, 64, 64).unwrap()).unwrap();
        for i in margin..64 - margin {
            for j in margin..64 - margin {
                let d = (crop.get(i, j) - full.get(r + i, c + j)).abs();
                assert!(d <= 1e-5, "({r},{c}) at ({i},{j}): {d}");
            }
        }
    }
}

fn tiny_set(n: usize, side: usize, seed: u64) -> TrainingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ndct: Vec<f32> = (0..n * side * side).map(|_| rng.random_range(0.2f32..0.8)).collect();
    let ldct = ndct.iter().map(|v| v + rng.random_range(-0.05f32..0.05)).collect();
    TrainingSet {
        ldct: Tensor::from_vec([n, 1, side, side], ldct),
        ndct: Tensor::from_vec([n, 1, side, side], ndct),
    }
}

fn small_spec(input_channels: usize) -> NetworkSpec {
    NetworkSpec {
        name: "small".into(),
        input_channels,
        layers: vec![
            LayerSpec::conv(input_channels, 4, 1),
            LayerSpec::BatchNorm { channels: 4 },
            LayerSpec::Relu,
            LayerSpec::conv(4, 1, 2),
        ],
        global_residual: false,
    }
}

fn quick_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let specs = build_wu_spec(2, small_spec).unwrap();
    let data = tiny_set(10, 16, 5);
    let cfgs = [quick_cfg(1), quick_cfg(2)];
    let a = train_cascade(&specs, &data, &cfgs, None).unwrap();
    let b = train_cascade(&specs, &data, &cfgs, None).unwrap();
    for (x, y) in a.levels.iter().zip(&b.levels) {
        assert_eq!(x.weights.to_bytes().unwrap(), y.weights.to_bytes().unwrap());
        assert_eq!(x.history.batch_losses, y.history.batch_losses);
    }
    let c = train_cascade(&specs, &data, &[quick_cfg(7), quick_cfg(2)], None).unwrap();
    assert_ne!(a.levels[0].weights, c.levels[0].weights);
}

#[test]
fn single_level_cascade_equals_train_level() {
    let specs = build_wu_spec(1, small_spec).unwrap();
    let data = tiny_set(6, 16, 6);
    let cfg = quick_cfg(3);
    let model = train_cascade(&specs, &data, std::slice::from_ref(&cfg), None).unwrap();
    let labels = cascade_ct::cascade::level_labels(specs[0].label_rule, &data.ldct, &data.ldct, &data.ndct);
    let direct = train_level(
        &specs[0],
        &LevelData {
            inputs: data.ldct.clone(),
            labels,
        },
        &cfg,
        None,
    )
    .unwrap();
    assert_eq!(model.levels[0].weights, direct.0);
    assert_eq!(model.levels[0].history.batch_losses, direct.1.batch_losses);
}

#[test]
fn history_has_one_record_per_epoch() {
    let specs = build_wu_spec(1, small_spec).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        ..quick_cfg(0)
    };
    let model = train_cascade(&specs, &tiny_set(5, 16, 7), &[cfg], None).unwrap();
    let h = &model.levels[0].history;
    assert_eq!(h.epochs.len(), 3);
    assert_eq!(h.batch_losses.len(), 3 * 2);
}

#[test]
fn perceptual_level_requires_an_extractor() {
    let mut specs = build_hybrid_spec();
    specs[0].network = small_spec(1);
    specs[0].network.global_residual = true;
    let err = train_cascade(&specs[..1], &tiny_set(4, 16, 8), &[quick_cfg(0)], None).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err:?}");
}

#[test]
fn saved_models_reload_identically() {
    let specs = build_wu_spec(2, small_spec).unwrap();
    let model = train_cascade(&specs, &tiny_set(6, 16, 9), &[quick_cfg(1), quick_cfg(2)], None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_model(&model, dir.path()).unwrap();
    let back = load_model(dir.path()).unwrap();
    let x = random_slice(20, 3);
    assert_eq!(model.predict(&x).unwrap(), back.predict(&x).unwrap());
    assert_eq!(
        model.manifest().unwrap().digest().unwrap(),
        back.manifest().unwrap().digest().unwrap()
    );

    // flipping one byte of a weight file is detected through the manifest hash
    let path = dir.path().join("level_2.ctw1");
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(load_model(dir.path()), Err(Error::WeightMismatch(_))));
}

#[test]
fn invalid_level_combinations_are_rejected() {
    let mut specs = build_hybrid_spec();
    specs[1].output_rule = OutputRule::Direct;
    assert!(matches!(
        cascade_ct::cascade::validate_levels(&specs),
        Err(Error::Config(_))
    ));

    let mut specs = build_hybrid_spec();
    specs[0].input_rule = InputRule::PrevPrediction;
    assert!(cascade_ct::cascade::validate_levels(&specs).is_err());

    let mut specs = build_wu_spec(2, build_cnn10).unwrap();
    specs[1].network = build_cnn10(1);
    assert!(cascade_ct::cascade::validate_levels(&specs).is_err());
}

#[test]
fn correction_levels_start_as_no_ops() {
    let cfg = TrainConfig {
        seed: 4,
        ..TrainConfig::default()
    };
    let x = random_slice(32, 5);
    for specs in [build_hybrid_spec(), build_wu_spec(2, build_cnn10).unwrap()] {
        let levels: Vec<TrainedLevel> = specs
            .iter()
            .enumerate()
            .map(|(k, spec)| TrainedLevel {
                spec: spec.clone(),
                ..level(spec.network.clone(), initial_weights(spec, &cfg), k == 0)
            })
            .collect();
        let levels = CascadeModel::new(levels).unwrap().predict_levels(&x).unwrap();
        // every level adds a correction, so untrained levels pass the input through
        assert_eq!(levels[0].pixels(), x.pixels());
        assert_eq!(levels[1].pixels(), x.pixels());
    }
}

#[test]
fn plain_glorot_without_zero_head() {
    let spec = &build_hybrid_spec()[1];
    let cfg = TrainConfig {
        zero_init_head: false,
        seed: 2,
        ..TrainConfig::default()
    };
    assert_eq!(initial_weights(spec, &cfg), spec.network.init_weights(2));
    let head = initial_weights(
        spec,
        &TrainConfig {
            seed: 2,
            ..TrainConfig::default()
        },
    );
    let glorot = spec.network.init_weights(2);
    let differing: Vec<&str> = head
        .entries()
        .iter()
        .zip(glorot.entries())
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.name.as_str())
        .collect();
    assert_eq!(differing, ["layer24.conv.kernel"]);
}
