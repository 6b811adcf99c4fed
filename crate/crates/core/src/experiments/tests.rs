use super::*;
use crate::convnet::ProbVector;
use crate::metrics::{confusion, scores};
use crate::synth::{make_corpus, CanvasSpec, Preset};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_corpus(preset: Preset, seed: u64) -> PreparedCorpus {
    let canvas = CanvasSpec {
        width_px: 300,
        height_px: 375,
        bow_um: 0.0,
        ..preset.canvas()
    };
    let corpus = make_corpus(&preset.profiles(), &canvas, 3, seed).unwrap();
    prepare(
        &corpus,
        DetrendParams::default(),
        NormalizeParams::default(),
    )
    .unwrap()
}

fn tiny_cnn_config() -> ExperimentConfig {
    ExperimentConfig {
        patch_sizes: vec![50],
        ensemble_size: Some(2),
        trials: 2,
        classifier: Classifier::Cnn,
        net: NetTemplate {
            conv_filters: vec![4, 8],
            dense_units: 16,
            max_input_side_px: 16,
            ..NetTemplate::default()
        },
        schedule: TrainSchedule::with_epochs(2, 1),
        ..ExperimentConfig::default()
    }
}

#[test]
fn ladder_scales_with_corpus_size() {
    assert_eq!(scaled_ladder(2400, 3000), FULL_SCALE_LADDER.to_vec());
    assert_eq!(
        scaled_ladder(600, 750),
        vec![10, 13, 25, 50, 75, 100, 150, 200, 300]
    );
    for s in scaled_ladder(600, 750) {
        assert!((s * s) as f64 <= 600.0 * 750.0 / 5.0);
    }
}

#[test]
fn input_side_follows_patch_size() {
    let t = NetTemplate::compact();
    assert_eq!(t.input_side_for(4), 8);
    assert_eq!(t.input_side_for(10), 8);
    assert_eq!(t.input_side_for(13), 16);
    assert_eq!(t.input_side_for(25), 24);
    assert_eq!(t.input_side_for(100), 32);
    let full = NetTemplate::default();
    assert_eq!(full.input_side_for(100), 64);
}

#[test]
fn config_round_trips_and_validates() {
    let mut cfg = tiny_cnn_config();
    cfg.channel = ChannelKind::Imf(2);
    cfg.test_paintings = Some([(1u8, "artist1_p1".to_string())].into_iter().collect());
    let json = serde_json::to_string(&cfg).unwrap();
    assert_eq!(
        serde_json::from_str::<ExperimentConfig>(&json).unwrap(),
        cfg
    );
    let partial: ExperimentConfig =
        serde_json::from_str(r#"{"trials": 5, "classifier": "mle"}"#).unwrap();
    assert_eq!(partial.trials, 5);
    assert_eq!(partial.classifier, Classifier::Mle);
    for bad in [
        ExperimentConfig {
            trials: 0,
            ..cfg.clone()
        },
        ExperimentConfig {
            patch_sizes: vec![0],
            ..cfg.clone()
        },
        ExperimentConfig {
            ensemble_size: Some(0),
            ..cfg.clone()
        },
        ExperimentConfig {
            validation_fraction: 1.0,
            ..cfg.clone()
        },
    ] {
        assert!(bad.validate().is_err());
    }
    assert_eq!(ExperimentConfig::default().ensemble_size_for(10), 10);
    assert_eq!(ExperimentConfig::default().ensemble_size_for(11), 20);
}

fn flat_map(width: usize, height: usize, side: usize, probs: ProbVector) -> AttributionMap {
    let mut cells = Vec::new();
    for row in 0..height / side {
        for col in 0..width / side {
            cells.push(MapCell {
                row,
                col,
                x0: col * side,
                y0: row * side,
                side,
                probs,
            });
        }
    }
    AttributionMap {
        painting_id: "p".into(),
        artist_id: 1,
        patch_px: side,
        width,
        height,
        cells,
    }
}

fn decode(png: &[u8]) -> image::RgbaImage {
    image::load_from_memory(png).unwrap().to_rgba8()
}

#[test]
fn one_hot_outputs_paint_solid_artist_colors() {
    let base = Grid::from_fn(40, 30, |x, y| ((x + y) % 7) as f64 / 6.0);
    for artist in 0..4 {
        let mut p = [0.0; 4];
        p[artist] = 1.0;
        let img =
            decode(&render_attribution_map(&base, &flat_map(40, 30, 10, ProbVector(p))).unwrap());
        assert_eq!(img.dimensions(), (40, 30));
        let c = ARTIST_COLORS[artist];
        assert!(img.pixels().all(|px| px.0 == [c[0], c[1], c[2], 255]));
    }
    assert_eq!(ARTIST_COLORS[0], [214, 39, 40]);
    assert_eq!(ARTIST_COLORS[1], [255, 127, 14]);
    assert_eq!(ARTIST_COLORS[2], [44, 160, 44]);
    assert_eq!(ARTIST_COLORS[3], [31, 119, 180]);
}

#[test]
fn uniform_outputs_leave_the_base_image() {
    let base = Grid::from_fn(40, 30, |x, y| ((3 * x + y) % 11) as f64 / 10.0);
    let img =
        decode(&render_attribution_map(&base, &flat_map(40, 30, 10, ProbVector::UNIFORM)).unwrap());
    for (x, y, px) in img.enumerate_pixels() {
        let g = (base.get(x as usize, y as usize) * 255.0).round() as u8;
        assert_eq!(px.0, [g, g, g, 255]);
    }
}

#[test]
fn alpha_maps_chance_to_zero() {
    let cell = |p: [f64; 4]| MapCell {
        row: 0,
        col: 0,
        x0: 0,
        y0: 0,
        side: 1,
        probs: ProbVector(p),
    };
    assert_eq!(cell([0.25; 4]).alpha(), 0.0);
    assert_eq!(cell([1.0, 0.0, 0.0, 0.0]).alpha(), 1.0);
    assert!((cell([0.625, 0.125, 0.125, 0.125]).alpha() - 0.5).abs() < 1e-12);
}

#[test]
fn render_rejects_mismatched_base() {
    let base = Grid::filled(20, 20, 0.5);
    assert!(render_attribution_map(&base, &flat_map(40, 30, 10, ProbVector::UNIFORM)).is_err());
}

#[test]
fn charts_are_pngs_of_fixed_size() {
    let series = vec![
        Series {
            points: vec![(10.0, 0.4, 0.05), (50.0, 0.8, 0.02), (300.0, 0.6, 0.1)],
            dashed: false,
        },
        Series {
            points: vec![(10.0, 0.3, 0.0), (300.0, 0.7, 0.0)],
            dashed: true,
        },
    ];
    let img = decode(&line_chart(&series, (0.0, 1.0)).unwrap());
    assert_eq!(img.dimensions(), (640, 400));
    let bars = vec![BarGroup {
        bars: vec![(0.6, 0.1), (0.3, 0.05)],
    }];
    assert_eq!(
        decode(&bar_chart(&bars, (0.0, 1.0)).unwrap()).dimensions(),
        (640, 400)
    );
    assert!(line_chart(&series, (1.0, 0.0)).is_err());
}

#[test]
fn mle_point_beats_chance_and_collapses_when_labels_are_shuffled() {
    let corpus = small_corpus(Preset::Separable, 3);
    let cfg = ExperimentConfig {
        classifier: Classifier::Mle,
        ..ExperimentConfig::default()
    };
    let point = run_point(&corpus, &cfg, Classifier::Mle, 50, 0).unwrap();
    assert_eq!(point.test_patches, 4 * 6 * 7);
    assert!(
        point.report.accuracy > 0.5,
        "mle accuracy {}",
        point.report.accuracy
    );

    let mut truth: Vec<u8> = point.predictions.iter().map(|p| p.0).collect();
    let mut accs = Vec::new();
    for s in 0..200 {
        truth.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
        let pairs: Vec<(u8, u8)> = truth
            .iter()
            .zip(&point.predictions)
            .map(|(&t, p)| (t, p.1))
            .collect();
        accs.push(scores(&confusion(&pairs).unwrap()).unwrap().accuracy);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    // Binomial standard error of the mean over 200 shuffles of 168 patches.
    let se = (0.25 * 0.75 / 168.0 / 200.0_f64).sqrt();
    assert!(
        (mean - 0.25).abs() < 4.0 * se + 0.01,
        "shuffled mean {mean}"
    );
}

#[test]
fn cnn_points_are_deterministic_and_trials_differ_in_seed() {
    let corpus = small_corpus(Preset::Separable, 5);
    let cfg = tiny_cnn_config();
    let a = run_point(&corpus, &cfg, Classifier::Cnn, 50, 0).unwrap();
    let b = run_point(&corpus, &cfg, Classifier::Cnn, 50, 0).unwrap();
    assert_eq!(a, b);
    let c = run_point(&corpus, &cfg, Classifier::Cnn, 50, 1).unwrap();
    assert_ne!(a.trial_seed, c.trial_seed);
    let jobs2 = ExperimentConfig {
        jobs: 2,
        ..cfg.clone()
    };
    assert_eq!(
        run_point(&corpus, &jobs2, Classifier::Cnn, 50, 0).unwrap(),
        a
    );
    assert!(run_point(&corpus, &cfg, Classifier::Both, 50, 0).is_err());
    assert!(run_point(&corpus, &cfg, Classifier::Cnn, 400, 0).is_err());
}

#[test]
fn sweep_std_comes_from_trial_accuracies() {
    let corpus = small_corpus(Preset::Separable, 7);
    let cfg = ExperimentConfig {
        patch_sizes: vec![50],
        trials: 3,
        classifier: Classifier::Mle,
        ..ExperimentConfig::default()
    };
    let table = patch_size_sweep(&corpus, &cfg).unwrap();
    assert_eq!(table.rows.len(), 1);
    let row = &table.rows[0];
    assert_eq!(row.trial_accuracies.len(), 3);
    let (mean, std) = crate::metrics::mean_std(&row.trial_accuracies);
    assert!((row.report.accuracy - mean).abs() < 1e-12);
    assert!((row.report.acc_std - std).abs() < 1e-12);
    assert_eq!(row.config_id, "mle-height");
    let csv = table.to_csv();
    assert!(csv.starts_with(crate::metrics::SCORE_CSV_HEADER));
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn fixed_test_paintings_override_the_draw() {
    let corpus = small_corpus(Preset::Separable, 9);
    let fixed: BTreeMap<u8, String> = (1..=4u8).map(|a| (a, format!("artist{a}_p2"))).collect();
    let cfg = ExperimentConfig {
        test_paintings: Some(fixed.clone()),
        ..ExperimentConfig::default()
    };
    for trial in 0..3 {
        assert_eq!(test_paintings(&corpus, &cfg, trial).unwrap(), fixed);
    }
    let drawn = ExperimentConfig::default();
    let t0 = test_paintings(&corpus, &drawn, 0).unwrap();
    assert_eq!(t0.len(), 4);
    for (a, id) in &t0 {
        assert!(corpus.painting(id).is_some_and(|p| p.artist_id == *a));
    }
}

#[test]
fn mle_map_probabilities_are_posteriors() {
    let corpus = small_corpus(Preset::Separable, 11);
    let cfg = ExperimentConfig::default();
    let tests = test_paintings(&corpus, &cfg, 0).unwrap();
    let models = fit_mle_models(&corpus, &cfg, ChannelKind::Height, &tests).unwrap();
    let painting = corpus.painting(&tests[&2]).unwrap();
    let map = attribution_map(
        painting,
        MapModel::Mle(&models),
        ChannelKind::Height,
        75,
        &cfg,
    )
    .unwrap();
    assert_eq!(map.cells.len(), 4 * 5);
    for c in &map.cells {
        assert!(c.probs.is_valid());
        assert!(c.confidence() > 0.0 && c.confidence() <= 1.0);
    }
    let png = render_attribution_map(&painting.height, &map).unwrap();
    assert_eq!(decode(&png).dimensions(), (300, 375));
    let csv = write_map_csv(&map);
    assert_eq!(csv.lines().count(), 21);
}
