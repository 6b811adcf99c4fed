use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::patching::{ChannelKind, DatasetSplit, Patch};

fn patch(values: Vec<f32>, side: usize, artist: u8, idx: usize) -> Patch {
    Patch {
        values,
        channels: 1,
        side,
        kind: ChannelKind::Height,
        painting_id: format!("artist{artist}_p{idx}"),
        artist_id: artist,
        grid_row: 0,
        grid_col: idx,
        origin_px: (0, 0),
        source_side_px: side,
        source_dims: (side, side),
        physical_side_mm: 1.0,
    }
}

fn split(train: Vec<Patch>, validation: Vec<Patch>) -> DatasetSplit {
    DatasetSplit {
        train,
        validation,
        test: Vec::new(),
        test_painting_per_artist: BTreeMap::new(),
        seed: 0,
    }
}

fn tiny_config() -> NetConfig {
    NetConfig {
        input_side_px: 8,
        in_channels: 1,
        conv_filters: vec![4, 4],
        kernel_px: 3,
        dense_units: 8,
        ..NetConfig::default()
    }
}

fn eval_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

#[test]
fn init_is_deterministic() {
    let a = Network::<f32>::init(NetConfig::default(), 5).unwrap();
    let b = Network::<f32>::init(NetConfig::default(), 5).unwrap();
    let c = Network::<f32>::init(NetConfig::default(), 6).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);
    assert!(a.tensor("conv0.bias").unwrap().iter().all(|&b| b == 0.0));
}

#[test]
fn invalid_configs_rejected() {
    let cfg = NetConfig {
        input_side_px: 60,
        ..NetConfig::default()
    };
    assert!(Network::<f32>::init(cfg, 0).is_err());
    let mut cfg = NetConfig::default();
    cfg.conv_filters.clear();
    assert!(cfg.validate().is_err());
    let cfg = NetConfig {
        classes: 3,
        ..NetConfig::default()
    };
    assert!(cfg.validate().is_err());
}

#[test]
fn feature_maps_halve() {
    let cfg = NetConfig::default();
    assert_eq!(cfg.block_sides(), vec![64, 32, 16]);
    assert_eq!(cfg.flat_len(), 8 * 8 * 64);
}

#[test]
fn zero_weights_give_uniform() {
    let mut net = Network::<f64>::init(tiny_config(), 1).unwrap();
    net.params.iter_mut().for_each(|p| *p = 0.0);
    let x: Vec<f64> = (0..64).map(|i| i as f64).collect();
    let out = net.predict(&x, 1).unwrap();
    for p in out[0].0 {
        assert!((p - 0.25).abs() < 1e-15);
    }
    let loss = net.loss::<ChaCha8Rng>(&x, &[3], None).unwrap();
    assert!((loss - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn eval_outputs_valid_and_repeatable() {
    let net = Network::<f32>::init(tiny_config(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f32> = (0..5 * 64).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let a = net.forward(&x, 5, Mode::Eval, &mut eval_rng()).unwrap();
    let b = net.forward(&x, 5, Mode::Eval, &mut rng).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(ProbVector::is_valid));
    assert!(net.forward(&x[..10], 5, Mode::Eval, &mut rng).is_err());
}

#[test]
fn one_by_one_micro_net_matches_hand_computation() {
    let cfg = NetConfig {
        input_side_px: 4,
        in_channels: 1,
        conv_filters: vec![1],
        kernel_px: 1,
        dense_units: 4,
        dropout_rate: 0.0,
        l2_factor: 0.0,
        classes: 4,
        standardize_inputs: false,
    };
    let mut net = Network::<f64>::init(cfg, 0).unwrap();
    net.params.iter_mut().for_each(|p| *p = 0.0);
    net.tensor_mut("conv0.weight").unwrap()[0] = 1.0;
    for name in ["dense1.weight", "dense2.weight"] {
        let w = net.tensor_mut(name).unwrap();
        for i in 0..4 {
            w[i * 4 + i] = 1.0;
        }
    }
    #[rustfmt::skip]
    let x = [
        1.0, 2.0, -1.0, 0.0,
        3.0, 2.0, 0.0, -4.0,
        0.0, 0.0, 1.0, 1.0,
        2.0, 2.0, 1.0, 5.0,
    ];
    // ReLU then 2×2 means: [2, 0, 1, 2]; softmax of those logits.
    let expected = [
        0.3994863046503028,
        0.05406459218899647,
        0.14696279851039795,
        0.3994863046503028,
    ];
    let out = net.predict(&x, 1).unwrap()[0];
    for (o, e) in out.0.iter().zip(expected) {
        assert!((o - e).abs() < 1e-12, "{o} vs {e}");
    }
}

#[test]
fn l2_penalty_is_additive() {
    let mut net = Network::<f64>::init(tiny_config(), 4).unwrap();
    let x: Vec<f64> = (0..2 * 64).map(|i| (i as f64 * 0.37).sin()).collect();
    let labels = [1, 4];
    net.config.l2_factor = 0.001;
    let a = net.loss::<ChaCha8Rng>(&x, &labels, None).unwrap();
    net.config.l2_factor = 0.002;
    let b = net.loss::<ChaCha8Rng>(&x, &labels, None).unwrap();
    let sq: f64 = ["dense1.weight", "dense2.weight"]
        .iter()
        .flat_map(|n| net.tensor(n).unwrap().iter())
        .map(|w| w * w)
        .sum();
    assert!((b - a - 0.001 * sq).abs() < 1e-12);
}

#[test]
fn labels_checked() {
    let net = Network::<f32>::init(tiny_config(), 0).unwrap();
    let x = vec![0.0f32; 64];
    assert!(matches!(
        net.loss_and_grads::<ChaCha8Rng>(&x, &[5], None),
        Err(crate::Error::LabelOutOfRange(5))
    ));
}

#[test]
fn gradients_match_finite_differences() {
    let configs = [
        NetConfig {
            input_side_px: 8,
            in_channels: 2,
            conv_filters: vec![3, 4],
            kernel_px: 3,
            dense_units: 5,
            ..NetConfig::default()
        },
        NetConfig {
            input_side_px: 4,
            in_channels: 1,
            conv_filters: vec![2],
            kernel_px: 1,
            dense_units: 3,
            dropout_rate: 0.0,
            ..NetConfig::default()
        },
    ];
    for (i, cfg) in configs.iter().enumerate() {
        let report = gradient_check(cfg, 3, 11 + i as u64, 1e-3).unwrap();
        assert!(report.checked > report.skipped_kinks, "{report:?}");
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut adam = Adam::new(1);
    let mut p = [0.0f64];
    adam.step(&mut p, &[2.0], 0.001, &[]);
    assert!((p[0] + 0.001).abs() < 1e-6);
}

#[test]
fn adam_zero_gradient_is_a_fixed_point() {
    let mut adam = Adam::new(3);
    let mut p = [0.5f32, -1.0, 2.0];
    for _ in 0..100 {
        adam.step(&mut p, &[0.0; 3], 0.01, &[]);
    }
    assert_eq!(p, [0.5, -1.0, 2.0]);
}

#[test]
fn adam_trajectories_reproducible() {
    let run = || {
        let mut adam = Adam::new(2);
        let mut p = [1.0f32, -2.0];
        for i in 0..50 {
            let g = [p[0] * 2.0 + i as f32 * 0.01, p[1].sin()];
            adam.step(&mut p, &g, 0.01, &[]);
        }
        p
    };
    assert_eq!(run().map(f32::to_bits), run().map(f32::to_bits));
}

fn constant_task(n: usize, side: usize) -> DatasetSplit {
    let mut train_set = Vec::new();
    let mut val = Vec::new();
    for i in 0..n {
        let artist = if i % 2 == 0 { 1 } else { 2 };
        let value = if artist == 1 { 0.0 } else { 1.0 };
        let p = patch(vec![value; side * side], side, artist, i);
        if i < n * 8 / 10 {
            train_set.push(p);
        } else {
            val.push(p);
        }
    }
    split(train_set, val)
}

#[test]
fn separable_toy_task_is_learned() {
    let data = constant_task(20, 8);
    let net = Network::<f32>::init(tiny_config(), 9).unwrap();
    let mut schedule = TrainSchedule::with_epochs(25, 0);
    schedule.phase1.batch_size = 4;
    let trained = train(net, &data, &schedule, 9).unwrap();
    assert_eq!(trained.log.len(), 25);
    assert_eq!(trained.best_val_acc, 1.0);
}

#[test]
fn schedule_and_split_preconditions() {
    let data = constant_task(20, 8);
    let net = Network::<f32>::init(tiny_config(), 0).unwrap();
    assert!(train(net.clone(), &data, &TrainSchedule::with_epochs(0, 0), 0).is_err());
    let empty = split(data.train.clone(), Vec::new());
    assert!(train(net, &empty, &TrainSchedule::with_epochs(1, 0), 0).is_err());
}

#[test]
fn training_is_deterministic() {
    let data = constant_task(20, 8);
    let schedule = TrainSchedule::with_epochs(3, 2);
    let run = || {
        let net = Network::<f32>::init(tiny_config(), 21).unwrap();
        train(net, &data, &schedule, 21).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    assert_eq!(a.network.params, b.network.params);
    assert_eq!(a.log.iter().filter(|r| r.phase == 2).count(), 2);
}

#[test]
fn frozen_blocks_stay_fixed_in_phase_two() {
    let data = constant_task(20, 8);
    let mut schedule = TrainSchedule::with_epochs(0, 3);
    schedule.phase2_trainable_blocks = Some(1);
    let net = Network::<f32>::init(tiny_config(), 2).unwrap();
    let before = net.tensor("conv0.weight").unwrap().to_vec();
    let before_last = net.tensor("conv1.weight").unwrap().to_vec();
    let trained = train(net, &data, &schedule, 2).unwrap();
    assert_eq!(trained.network.tensor("conv0.weight").unwrap(), &before[..]);
    assert_ne!(
        trained.network.tensor("conv1.weight").unwrap(),
        &before_last[..]
    );
}

#[test]
fn memorizes_eight_patches() {
    let cfg = NetConfig {
        conv_filters: vec![8, 8],
        dense_units: 32,
        dropout_rate: 0.0,
        l2_factor: 0.0,
        ..tiny_config()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let patches: Vec<Patch> = (0..8)
        .map(|i| {
            patch(
                (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                8,
                (i % 4) as u8 + 1,
                i,
            )
        })
        .collect();
    let data = split(patches.clone(), patches);
    let mut schedule = TrainSchedule::with_epochs(200, 0);
    schedule.phase1.batch_size = 1;
    let net = Network::<f32>::init(cfg, 77).unwrap();
    let trained = train(net, &data, &schedule, 77).unwrap();
    let best = trained
        .log
        .iter()
        .map(|r| r.train_loss)
        .fold(f64::INFINITY, f64::min);
    assert!(best <= 0.01, "best loss {best}");
}

#[test]
fn inverted_dropout_preserves_expectation() {
    // Positive weights and inputs keep every ReLU active, so the logits are
    // linear in the dropout masks; log-probability differences recover them.
    let cfg = NetConfig {
        input_side_px: 4,
        in_channels: 1,
        conv_filters: vec![2],
        kernel_px: 1,
        dense_units: 3,
        dropout_rate: 0.25,
        l2_factor: 0.0,
        classes: 4,
        standardize_inputs: false,
    };
    let mut net = Network::<f64>::init(cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    net.params
        .iter_mut()
        .for_each(|p| *p = rng.gen_range(0.05..0.5));
    let x: Vec<f64> = (0..16).map(|_| rng.gen_range(0.1..1.0)).collect();
    let diffs = |p: ProbVector| [1, 2, 3].map(|i| p.0[i].ln() - p.0[0].ln());
    let eval = diffs(net.predict(&x, 1).unwrap()[0]);
    let n = 10_000;
    let samples: Vec<[f64; 3]> = (0..n)
        .map(|_| diffs(net.forward(&x, 1, Mode::Train, &mut rng).unwrap()[0]))
        .collect();
    for k in 0..3 {
        let vals: Vec<f64> = samples.iter().map(|s| s[k]).collect();
        let (mean, sd) = crate::metrics::mean_std(&vals);
        let se = sd / (n as f64).sqrt();
        assert!(
            (mean - eval[k]).abs() <= 4.0 * se + 1e-12,
            "{mean} vs {} (se {se})",
            eval[k]
        );
    }
}

#[test]
fn prob_vector_mean_and_argmax() {
    let m = ProbVector::mean(&[
        ProbVector([1.0, 0.0, 0.0, 0.0]),
        ProbVector([0.0, 1.0, 0.0, 0.0]),
    ])
    .unwrap();
    assert_eq!(m, ProbVector([0.5, 0.5, 0.0, 0.0]));
    assert_eq!(m.argmax(), 1);
    assert!(ProbVector::mean(&[]).is_none());
    assert_eq!(ProbVector([0.1, 0.2, 0.6, 0.1]).argmax(), 3);
}

#[test]
fn ensemble_prediction_is_member_mean() {
    let a = Network::<f32>::init(tiny_config(), 1).unwrap();
    let b = Network::<f32>::init(tiny_config(), 2).unwrap();
    let x: Vec<f32> = (0..3 * 64).map(|i| (i as f32 * 0.1).cos()).collect();
    let single = EnsembleModel::new(vec![a.clone()], vec![1]).unwrap();
    assert_eq!(
        ensemble_predict(&single, &x, 3).unwrap(),
        a.predict(&x, 3).unwrap()
    );
    let pair = EnsembleModel::new(vec![a.clone(), b.clone()], vec![1, 2]).unwrap();
    let out = ensemble_predict(&pair, &x, 3).unwrap();
    let (pa, pb) = (a.predict(&x, 3).unwrap(), b.predict(&x, 3).unwrap());
    for i in 0..3 {
        assert!(out[i].is_valid());
        for k in 0..4 {
            assert!((out[i].0[k] - 0.5 * (pa[i].0[k] + pb[i].0[k])).abs() < 1e-12);
        }
    }
    assert!(EnsembleModel::new(Vec::new(), Vec::new()).is_err());
}

#[test]
fn ensemble_training_independent_of_workers() {
    let data = constant_task(20, 8);
    let schedule = TrainSchedule::with_epochs(2, 1);
    let (one, _) = train_ensemble(&tiny_config(), &data, &schedule, 3, 5, 1).unwrap();
    let (two, logs) = train_ensemble(&tiny_config(), &data, &schedule, 3, 5, 2).unwrap();
    assert_eq!(logs.len(), 3);
    for (m1, m2) in one.members.iter().zip(&two.members) {
        assert_eq!(m1.params, m2.params);
    }
    assert_ne!(one.members[0].params, one.members[1].params);
}

#[test]
fn checkpoint_round_trip() {
    let mut net = Network::<f32>::init(tiny_config(), 12).unwrap();
    net.input_shift = vec![0.3];
    net.input_scale = vec![2.5];
    let bytes = encode_network(&net);
    let origin = std::path::Path::new("mem");
    let back = decode_network(&bytes, origin).unwrap();
    assert_eq!(back, net);
    assert_eq!(&bytes[..4], b"CNNW");

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode_network(&bad, origin).is_err());
    assert!(decode_network(&bytes[..bytes.len() - 3], origin).is_err());
    let mut tampered = bytes.clone();
    tampered[50] ^= 1; // inside the config JSON
    assert!(decode_network(&tampered, origin).is_err());
}

#[test]
fn ensemble_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let members = vec![
        Network::<f32>::init(tiny_config(), 1).unwrap(),
        Network::<f32>::init(tiny_config(), 2).unwrap(),
    ];
    let model = EnsembleModel::new(members, vec![1, 2]).unwrap();
    save_ensemble(dir.path(), &model).unwrap();
    let back = load_ensemble(dir.path()).unwrap();
    assert_eq!(back.members, model.members);
    assert_eq!(back.member_seeds, vec![1, 2]);
}
