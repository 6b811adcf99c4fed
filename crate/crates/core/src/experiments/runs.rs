use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::plot::{bar_chart, line_chart, BarGroup, Series};
use super::{Classifier, ExperimentConfig, PreparedCorpus};
use crate::convnet::{
    ensemble_predict, pack_patches, train_ensemble, EnsembleModel, TrainedNetwork,
};
use crate::density::{fit_kde, mle_attribute, DensityModel};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::metrics::{
    aggregate, confusion, scores, ConfusionMatrix, ScoreReport, SCORE_CSV_HEADER,
};
use crate::patching::{
    classify_region, patch_cells, patchify_source, split_dataset, ChannelKind, DatasetSplit, Patch,
    PatchSource, PatchSpec, RegionClass,
};
use crate::seed::{derive_seed, rng_for};
use crate::surface::write_atomic;

/// Outcome of one (classifier, channel, patch size, trial) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub classifier: Classifier,
    pub channel: ChannelKind,
    pub patch_px: usize,
    pub trial: usize,
    pub trial_seed: u64,
    pub test_paintings: BTreeMap<u8, String>,
    pub train_patches: usize,
    pub test_patches: usize,
    /// `(true, predicted)` label pairs over the test patches.
    pub predictions: Vec<(u8, u8)>,
    pub confusion: ConfusionMatrix,
    pub report: ScoreReport,
}

pub fn trial_seed(config: &ExperimentConfig, trial: usize) -> u64 {
    derive_seed(config.seed, "trial", trial as u64)
}

/// Held-out painting per artist for a trial: the configured choice, or one
/// drawn from the trial seed.
pub fn test_paintings(
    corpus: &PreparedCorpus,
    config: &ExperimentConfig,
    trial: usize,
) -> Result<BTreeMap<u8, String>> {
    let by_artist = corpus.ids_by_artist();
    for (artist, ids) in &by_artist {
        if ids.len() < 3 {
            return Err(Error::invalid(format!(
                "artist {artist} has {} paintings; at least 3 are required",
                ids.len()
            )));
        }
    }
    if let Some(fixed) = &config.test_paintings {
        return Ok(fixed.clone());
    }
    let seed = trial_seed(config, trial);
    Ok(by_artist
        .iter()
        .map(|(&artist, ids)| {
            let mut rng = rng_for(seed, "test-painting", u64::from(artist));
            (artist, ids.choose(&mut rng).expect("non-empty").clone())
        })
        .collect())
}

fn check_patch_fits(corpus: &PreparedCorpus, patch_px: usize) -> Result<()> {
    if patch_px == 0 || patch_px > corpus.width || patch_px > corpus.height {
        return Err(Error::invalid(format!(
            "patch side {patch_px} px does not fit {}x{} paintings",
            corpus.width, corpus.height
        )));
    }
    Ok(())
}

/// Cut every painting into classifier patches of one channel kind.
pub fn corpus_patches(
    corpus: &PreparedCorpus,
    config: &ExperimentConfig,
    channel: ChannelKind,
    spec: &PatchSpec,
) -> Result<Vec<Patch>> {
    let mut out = Vec::new();
    for p in &corpus.paintings {
        let src = PatchSource {
            painting_id: &p.painting_id,
            artist_id: p.artist_id,
            pitch_um: p.pitch_um,
            kind: channel,
            channels: p.channel_grids(channel, &config.sift)?,
        };
        out.extend(patchify_source(&src, spec)?);
    }
    Ok(out)
}

/// Keep the first `limit` patches of each artist, preserving order.
fn cap_per_artist(patches: Vec<Patch>, limit: Option<usize>) -> Vec<Patch> {
    let Some(limit) = limit else { return patches };
    let mut seen: BTreeMap<u8, usize> = BTreeMap::new();
    patches
        .into_iter()
        .filter(|p| {
            let n = seen.entry(p.artist_id).or_default();
            *n += 1;
            *n <= limit
        })
        .collect()
}

fn validation_cap(config: &ExperimentConfig) -> Option<usize> {
    config.max_train_patches_per_artist.map(|n| {
        let f = config.validation_fraction;
        ((n as f64 * f / (1.0 - f)).round() as usize).max(1)
    })
}

#[allow(clippy::too_many_arguments)]
fn score_point(
    classifier: Classifier,
    channel: ChannelKind,
    patch_px: usize,
    trial: usize,
    trial_seed: u64,
    test_paintings: BTreeMap<u8, String>,
    train_patches: usize,
    predictions: Vec<(u8, u8)>,
) -> Result<PointResult> {
    if predictions.is_empty() {
        return Err(Error::invalid(format!("no test patches at {patch_px} px")));
    }
    let cm = confusion(&predictions)?;
    Ok(PointResult {
        classifier,
        channel,
        patch_px,
        trial,
        trial_seed,
        test_paintings,
        train_patches,
        test_patches: predictions.len(),
        report: scores(&cm)?,
        confusion: cm,
        predictions,
    })
}

/// Training and validation sets with the per-artist caps applied.
pub fn capped_split(
    train: Vec<Patch>,
    validation: Vec<Patch>,
    config: &ExperimentConfig,
    seed: u64,
) -> DatasetSplit {
    DatasetSplit {
        train: cap_per_artist(train, config.max_train_patches_per_artist),
        validation: cap_per_artist(validation, validation_cap(config)),
        test: Vec::new(),
        test_painting_per_artist: BTreeMap::new(),
        seed,
    }
}

/// Train the configured ensemble for one patch size and channel.
pub fn train_point(
    split: &DatasetSplit,
    config: &ExperimentConfig,
    channel: ChannelKind,
    patch_px: usize,
    seed: u64,
) -> Result<(EnsembleModel, Vec<TrainedNetwork>)> {
    let net = config.net.net_config(patch_px, channel.channels());
    let size = config.ensemble_size_for(patch_px);
    train_ensemble(&net, split, &config.schedule, size, seed, config.jobs)
}

/// `(true, predicted)` pairs of an ensemble over labelled patches.
pub fn evaluate_ensemble(ensemble: &EnsembleModel, test: &[Patch]) -> Result<Vec<(u8, u8)>> {
    let (x, y) = pack_patches(test);
    let probs = ensemble_predict(ensemble, &x, y.len())?;
    Ok(y.iter()
        .zip(&probs)
        .map(|(&t, p)| (t, p.argmax()))
        .collect())
}

fn cnn_predictions(
    train: Vec<Patch>,
    validation: Vec<Patch>,
    test: &[Patch],
    config: &ExperimentConfig,
    channel: ChannelKind,
    patch_px: usize,
    seed: u64,
) -> Result<(Vec<(u8, u8)>, usize)> {
    let split = capped_split(train, validation, config, seed);
    let (ensemble, _) = train_point(&split, config, channel, patch_px, seed)?;
    Ok((evaluate_ensemble(&ensemble, test)?, split.train.len()))
}

/// Single-channel values an MLE model scores: relative heights or an IMF, in microns.
pub(crate) fn mle_source<'a>(
    p: &'a super::PreparedPainting,
    channel: ChannelKind,
    config: &ExperimentConfig,
) -> Result<&'a Grid> {
    match channel {
        ChannelKind::Height => Ok(&p.relative),
        ChannelKind::Imf(_) => Ok(p.channel_grids(channel, &config.sift)?[0]),
        ChannelKind::PseudoColor => Err(Error::invalid(
            "the MLE classifier needs a single height-like channel",
        )),
    }
}

/// Per-artist densities fitted on every pixel of the non-held-out paintings.
pub fn fit_mle_models(
    corpus: &PreparedCorpus,
    config: &ExperimentConfig,
    channel: ChannelKind,
    test_paintings: &BTreeMap<u8, String>,
) -> Result<Vec<DensityModel>> {
    let mut samples: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    for p in &corpus.paintings {
        if test_paintings.get(&p.artist_id) == Some(&p.painting_id) {
            continue;
        }
        samples
            .entry(p.artist_id)
            .or_default()
            .extend_from_slice(&mle_source(p, channel, config)?.data);
    }
    samples.iter().map(|(&a, s)| fit_kde(s, a)).collect()
}

/// Patch-level MLE scores of one painting at native resolution.
pub(crate) fn mle_scores(
    grid: &Grid,
    patch_px: usize,
    models: &[DensityModel],
) -> Result<Vec<(crate::patching::Cell, crate::density::AttributionScore)>> {
    patch_cells(grid.width, grid.height, &PatchSpec::new(patch_px, 8))?
        .into_iter()
        .map(|c| {
            Ok((
                c,
                mle_attribute(&grid.window(c.x0, c.y0, patch_px), models)?,
            ))
        })
        .collect()
}

/// The held-out-painting split used by CNN points of one trial.
pub fn point_split(
    corpus: &PreparedCorpus,
    config: &ExperimentConfig,
    channel: ChannelKind,
    patch_px: usize,
    trial: usize,
) -> Result<DatasetSplit> {
    check_patch_fits(corpus, patch_px)?;
    let tests = test_paintings(corpus, config, trial)?;
    let spec = PatchSpec::new(patch_px, config.net.input_side_for(patch_px));
    let patches = corpus_patches(corpus, config, channel, &spec)?;
    split_dataset(
        patches,
        &tests,
        config.validation_fraction,
        trial_seed(config, trial),
    )
}

/// `(true, predicted)` MLE pairs over the held-out paintings' patches.
pub fn evaluate_mle(
    corpus: &PreparedCorpus,
    config: &ExperimentConfig,
    models: &[DensityModel],
    channel: ChannelKind,
    test_paintings: &BTreeMap<u8, String>,
    patch_px: usize,
) -> Result<Vec<(u8, u8)>> {
    check_patch_fits(corpus, patch_px)?;
    let mut predictions = Vec::new();
    for (&artist, id) in test_paintings {
        let p = corpus
            .painting(id)
            .ok_or_else(|| Error::invalid(format!("unknown test painting {id}")))?;
        let grid = mle_source(p, channel, config)?;
        predictions.extend(
            mle_scores(grid, patch_px, models)?
                .into_iter()
                .map(|(_, s)| (artist, s.winner)),
        );
    }
    Ok(predictions)
}

/// Evaluate one classifier at one patch size for one trial.
pub fn run_point(
    corpus: &PreparedCorpus,
    config: &ExperimentConfig,
    classifier: Classifier,
    patch_px: usize,
    trial: usize,
) -> Result<PointResult> {
    check_patch_fits(corpus, patch_px)?;
    let seed = trial_seed(config, trial);
    let tests = test_paintings(corpus, config, trial)?;
    let channel = config.channel;
    match classifier {
        Classifier::Both => Err(Error::invalid(
            "run_point evaluates one classifier at a time",
        )),
        Classifier::Mle => {
            let models = fit_mle_models(corpus, config, channel, &tests)?;
            let predictions = evaluate_mle(corpus, config, &models, channel, &tests, patch_px)?;
            let train_pixels = models.iter().map(|m| m.sample_count).sum();
            score_point(
                classifier,
                channel,
                patch_px,
                trial,
                seed,
                tests,
                train_pixels,
                predictions,
            )
        }
        Classifier::Cnn => {
            let split = point_split(corpus, config, channel, patch_px, trial)?;
            let (predictions, n_train) = cnn_predictions(
                split.train,
                split.validation,
                &split.test,
                config,
                channel,
                patch_px,
                ensemble_seed(seed, channel, patch_px),
            )?;
            score_point(
                classifier,
                channel,
                patch_px,
                trial,
                seed,
                tests,
                n_train,
                predictions,
            )
        }
    }
}

/// Seed of the ensemble trained at one point of a trial.
pub fn ensemble_seed(trial_seed: u64, channel: ChannelKind, patch_px: usize) -> u64 {
    derive_seed(trial_seed, &format!("ensemble/{channel}"), patch_px as u64)
}

/// One aggregated table row: a classifier/channel configuration at one size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub config_id: String,
    pub classifier: Classifier,
    pub channel: ChannelKind,
    pub patch_px: usize,
    pub report: ScoreReport,
    pub trial_accuracies: Vec<f64>,
}

impl SweepRow {
    fn from_points(config_id: String, points: &[PointResult]) -> Result<Self> {
        let first = points
            .first()
            .ok_or_else(|| Error::invalid("no trials to aggregate"))?;
        let reports: Vec<ScoreReport> = points.iter().map(|p| p.report.clone()).collect();
        Ok(SweepRow {
            config_id,
            classifier: first.classifier,
            channel: first.channel,
            patch_px: first.patch_px,
            report: aggregate(&reports)?,
            trial_accuracies: points.iter().map(|p| p.report.accuracy).collect(),
        })
    }

    pub fn mean_f1(&self) -> f64 {
        self.report.f1.iter().sum::<f64>() / self.report.f1.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub experiment: String,
    pub config: ExperimentConfig,
    pub rows: Vec<SweepRow>,
    /// Points that could not be evaluated, with the reason.
    pub skipped: Vec<String>,
}

impl SweepTable {
    pub fn row(&self, config_id: &str, patch_px: usize) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.config_id == config_id && r.patch_px == patch_px)
    }

    pub fn config_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for r in &self.rows {
            if !ids.contains(&r.config_id) {
                ids.push(r.config_id.clone());
            }
        }
        ids
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(SCORE_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.report.csv_row(&r.config_id, r.patch_px));
            s.push('\n');
        }
        s
    }
}

fn config_id(classifier: Classifier, channel: ChannelKind) -> String {
    format!("{}-{}", classifier.name(), channel)
}

fn run_trials(
    corpus: &PreparedCorpus,
    config: &ExperimentConfig,
    classifier: Classifier,
    patch_px: usize,
) -> Result<SweepRow> {
    let points = (0..config.trials)
        .map(|t| {
            log::info!(
                "{} at {patch_px} px, trial {}/{}",
                config_id(classifier, config.channel),
                t + 1,
                config.trials
            );
            run_point(corpus, config, classifier, patch_px, t)
        })
        .collect::<Result<Vec<_>>>()?;
    SweepRow::from_points(config_id(classifier, config.channel), &points)
}

/// Accuracy and F1 against patch size for each selected classifier.
pub fn patch_size_sweep(corpus: &PreparedCorpus, config: &ExperimentConfig) -> Result<SweepTable> {
    config.validate()?;
    let sizes = config.sizes_for(corpus.width, corpus.height);
    for &s in &sizes {
        check_patch_fits(corpus, s)?;
    }
    let mut rows = Vec::new();
    for classifier in config.classifier.members() {
        for &s in &sizes {
            rows.push(run_trials(corpus, config, classifier, s)?);
        }
    }
    Ok(SweepTable {
        experiment: "patch-size".into(),
        config: config.clone(),
        rows,
        skipped: Vec::new(),
    })
}

/// CNN accuracy per IMF channel next to the full-height baseline. IMFs that
/// some painting lacks are reported in `skipped`.
pub fn imf_sweep(
    corpus: &PreparedCorpus,
    config: &ExperimentConfig,
    imfs: &[usize],
) -> Result<SweepTable> {
    config.validate()?;
    if imfs.contains(&0) {
        return Err(Error::invalid("IMF indices start at 1"));
    }
    let sizes = config.sizes_for(corpus.width, corpus.height);
    for &s in &sizes {
        check_patch_fits(corpus, s)?;
    }
    for p in &corpus.paintings {
        p.imfs(&config.sift)?;
    }
    let available = corpus
        .paintings
        .iter()
        .map(|p| p.imfs(&config.sift).map(|s| s.imfs.len()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .min()
        .unwrap_or(0);
    let mut channels = vec![ChannelKind::Height];
    let mut skipped = Vec::new();
    for &k in imfs {
        if k <= available {
            channels.push(ChannelKind::Imf(k));
        } else {
            let msg = format!("imf:{k} skipped: some painting has only {available} IMFs");
            log::warn!("{msg}");
            skipped.push(msg);
        }
    }
    let mut rows = Vec::new();
    for channel in channels {
        let cfg = ExperimentConfig {
            channel,
            ..config.clone()
        };
        for &s in &sizes {
            rows.push(run_trials(corpus, &cfg, Classifier::Cnn, s)?);
        }
    }
    Ok(SweepTable {
        experiment: "imf".into(),
        config: config.clone(),
        rows,
        skipped,
    })
}

pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_JSON: &str = "sweep.json";

/// Write `sweep.csv`, `sweep.json`, and accuracy/F1 plots (line plots for a
/// patch-size sweep, bars for an IMF sweep). Returns the written paths.
pub fn write_sweep(table: &SweepTable, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let csv = dir.join(SWEEP_CSV);
    write_atomic(&csv, table.to_csv().as_bytes())?;
    written.push(csv);
    let json = dir.join(SWEEP_JSON);
    write_atomic(&json, serde_json::to_string_pretty(table)?.as_bytes())?;
    written.push(json);

    let ids = table.config_ids();
    let mut sizes: Vec<usize> = table.rows.iter().map(|r| r.patch_px).collect();
    sizes.sort_unstable();
    sizes.dedup();
    for (name, metric) in [("accuracy.png", 0usize), ("f1.png", 1)] {
        let value = |r: &SweepRow| {
            if metric == 0 {
                r.report.accuracy
            } else {
                r.mean_f1()
            }
        };
        let png = if sizes.len() > 1 {
            let series: Vec<Series> = ids
                .iter()
                .map(|id| Series {
                    points: table
                        .rows
                        .iter()
                        .filter(|r| &r.config_id == id)
                        .map(|r| {
                            (
                                r.patch_px as f64,
                                value(r),
                                if metric == 0 { r.report.acc_std } else { 0.0 },
                            )
                        })
                        .collect(),
                    dashed: id.starts_with("mle"),
                })
                .collect();
            line_chart(&series, (0.0, 1.0))?
        } else {
            let groups: Vec<BarGroup> = vec![BarGroup {
                bars: ids
                    .iter()
                    .filter_map(|id| table.rows.iter().find(|r| &r.config_id == id))
                    .map(|r| (value(r), if metric == 0 { r.report.acc_std } else { 0.0 }))
                    .collect(),
            }];
            bar_chart(&groups, (0.0, 1.0))?
        };
        let path = dir.join(name);
        write_atomic(&path, &png)?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    BackgroundToForeground,
    ForegroundToBackground,
}

impl Direction {
    pub const ALL: [Direction; 2] = [
        Direction::BackgroundToForeground,
        Direction::ForegroundToBackground,
    ];

    pub fn regions(&self) -> (RegionClass, RegionClass) {
        match self {
            Direction::BackgroundToForeground => (RegionClass::Background, RegionClass::Foreground),
            Direction::ForegroundToBackground => (RegionClass::Foreground, RegionClass::Background),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Direction::BackgroundToForeground => "bg-to-fg",
            Direction::ForegroundToBackground => "fg-to-bg",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossRegionRow {
    pub direction: Direction,
    pub channel: ChannelKind,
    pub report: ScoreReport,
    pub trial_accuracies: Vec<f64>,
    /// Training-set size of each trial.
    pub train_patches: Vec<usize>,
    pub test_patches: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossRegionResult {
    pub patch_px: usize,
    pub config: ExperimentConfig,
    pub rows: Vec<CrossRegionRow>,
}

impl CrossRegionResult {
    pub fn row(&self, direction: Direction, channel: ChannelKind) -> Option<&CrossRegionRow> {
        self.rows
            .iter()
            .find(|r| r.direction == direction && r.channel == channel)
    }
}

/// Train on one region class, test on the other, for height and pseudo-color
/// channels. Border patches are dropped. The test region is taken from each
/// artist's held-out painting.
pub fn cross_region_experiment(
    corpus: &PreparedCorpus,
    config: &ExperimentConfig,
    patch_px: usize,
) -> Result<CrossRegionResult> {
    config.validate()?;
    check_patch_fits(corpus, patch_px)?;
    let mut rows = Vec::new();
    for channel in [ChannelKind::Height, ChannelKind::PseudoColor] {
        let spec = PatchSpec::new(patch_px, config.net.input_side_for(patch_px));
        let patches = corpus_patches(corpus, config, channel, &spec)?;
        let mut regions = Vec::with_capacity(patches.len());
        for p in &patches {
            let painting = corpus.painting(&p.painting_id).expect("patch from corpus");
            regions.push((
                (p.painting_id.clone(), p.grid_row, p.grid_col),
                classify_region(p, &painting.mask, &config.region_thresholds)?,
            ));
        }
        let region_of: BTreeMap<(String, usize, usize), RegionClass> =
            regions.into_iter().collect();
        let region = |p: &Patch| region_of[&(p.painting_id.clone(), p.grid_row, p.grid_col)];

        for direction in Direction::ALL {
            let (from, to) = direction.regions();
            let mut reports = Vec::new();
            let mut train_sizes = Vec::new();
            let mut test_sizes = Vec::new();
            for trial in 0..config.trials {
                log::info!(
                    "cross-region {} {channel}, trial {}/{}",
                    direction.name(),
                    trial + 1,
                    config.trials
                );
                let seed = trial_seed(config, trial);
                let tests = test_paintings(corpus, config, trial)?;
                let split =
                    split_dataset(patches.clone(), &tests, config.validation_fraction, seed)?;
                let keep = |v: Vec<Patch>, r: RegionClass| -> Vec<Patch> {
                    v.into_iter().filter(|p| region(p) == r).collect()
                };
                let train = keep(split.train, from);
                let validation = keep(split.validation, from);
                let test = keep(split.test, to);
                for (name, set) in [
                    ("training", &train),
                    ("validation", &validation),
                    ("test", &test),
                ] {
                    if set.is_empty() {
                        return Err(Error::invalid(format!(
                            "{} {channel}: {name} region set is empty at {patch_px} px",
                            direction.name()
                        )));
                    }
                }
                let ens_seed = derive_seed(
                    seed,
                    &format!("cross/{}/{channel}", direction.name()),
                    patch_px as u64,
                );
                let (predictions, n_train) = cnn_predictions(
                    train, validation, &test, config, channel, patch_px, ens_seed,
                )?;
                let point = score_point(
                    Classifier::Cnn,
                    channel,
                    patch_px,
                    trial,
                    seed,
                    tests,
                    n_train,
                    predictions,
                )?;
                train_sizes.push(point.train_patches);
                test_sizes.push(point.test_patches);
                reports.push(point.report);
            }
            rows.push(CrossRegionRow {
                direction,
                channel,
                report: aggregate(&reports)?,
                trial_accuracies: reports.iter().map(|r| r.accuracy).collect(),
                train_patches: train_sizes,
                test_patches: test_sizes,
            });
        }
    }
    Ok(CrossRegionResult {
        patch_px,
        config: config.clone(),
        rows,
    })
}

pub const CROSS_REGION_CSV_HEADER: &str =
    "direction,channel,accuracy,acc_std,trials,mean_train_patches,mean_test_patches";

/// Write `cross_region.csv`, `cross_region.json` and a grouped bar chart
/// (one group per direction, one bar per channel).
pub fn write_cross_region(result: &CrossRegionResult, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mean = |v: &[usize]| v.iter().sum::<usize>() as f64 / v.len().max(1) as f64;
    let mut csv = String::from(CROSS_REGION_CSV_HEADER);
    csv.push('\n');
    for r in &result.rows {
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{},{:.1},{:.1}\n",
            r.direction.name(),
            r.channel,
            r.report.accuracy,
            r.report.acc_std,
            r.report.trials,
            mean(&r.train_patches),
            mean(&r.test_patches)
        ));
    }
    let mut written = Vec::new();
    let csv_path = dir.join("cross_region.csv");
    write_atomic(&csv_path, csv.as_bytes())?;
    written.push(csv_path);
    let json_path = dir.join("cross_region.json");
    write_atomic(&json_path, serde_json::to_string_pretty(result)?.as_bytes())?;
    written.push(json_path);
    let groups: Vec<BarGroup> = Direction::ALL
        .iter()
        .map(|&d| BarGroup {
            bars: result
                .rows
                .iter()
                .filter(|r| r.direction == d)
                .map(|r| (r.report.accuracy, r.report.acc_std))
                .collect(),
        })
        .collect();
    let png_path = dir.join("cross_region.png");
    write_atomic(&png_path, &bar_chart(&groups, (0.0, 1.0))?)?;
    written.push(png_path);
    Ok(written)
}
