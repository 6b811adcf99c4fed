use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use brushforge::convnet::{load_ensemble, save_ensemble, write_epoch_log};
use brushforge::density::DensityModel;
use brushforge::emd::length_scale;
use brushforge::experiments::{
    attribution_map, capped_split, cross_region_experiment, ensemble_seed, evaluate_ensemble,
    evaluate_mle, fit_mle_models, imf_sweep, patch_size_sweep, point_split, prepare,
    render_attribution_map, test_paintings, train_point, trial_seed, write_cross_region,
    write_map_csv, write_sweep, Classifier, ExperimentConfig, MapModel, PreparedCorpus,
};
use brushforge::metrics::{confusion, scores, SCORE_CSV_HEADER};
use brushforge::patching::{classify_region, ChannelKind};
use brushforge::surface::{
    detrend, load_heightmap, normalize, save_heightmap, sidecar_path, write_atomic, HeightMap,
    MapFormat,
};
use brushforge::synth::{manifest_path, preset_corpus, write_corpus, CORPUS_MANIFEST};
use serde::{Deserialize, Serialize};

use crate::manifest::{Run, RunManifest};
use crate::{Command, ExpArgs, ImfArgs, IngestArgs, ModelArgs, RenderArgs, SynthArgs};

/// What `train` and `fit-mle` leave behind for `eval` and `render-map`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelPoint {
    pub classifier: Classifier,
    pub channel: ChannelKind,
    pub patch_px: usize,
    pub trial: usize,
    pub test_paintings: BTreeMap<u8, String>,
    pub config: ExperimentConfig,
}

const POINT_JSON: &str = "point.json";
const ENSEMBLE_DIR: &str = "ensemble";
const MODELS_JSON: &str = "models.json";

pub fn dispatch(command: Command) -> Result<RunManifest> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Ingest(a) => ingest(a),
        Command::Patchify(a) => patchify(a),
        Command::Emd(a) => emd(a),
        Command::FitMle(a) => fit_mle(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::SweepPatch(a) => sweep_patch(a),
        Command::SweepImf(a) => sweep_imf(a),
        Command::CrossRegion(a) => cross_region(a),
        Command::RenderMap(a) => render_map(a),
    }
}

fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
    let de = &mut serde_json::Deserializer::from_slice(&bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        anyhow!(
            "invalid config {}: field `{}`: {}",
            path.display(),
            e.path(),
            e.inner()
        )
    })
}

fn apply_flags(cfg: &mut ExperimentConfig, a: &ExpArgs) {
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    if let Some(j) = a.common.jobs {
        cfg.jobs = j;
    }
    if let Some(c) = &a.corpus {
        cfg.corpus = Some(c.clone());
    }
    if let Some(p) = a.preset {
        cfg.preset = Some(p);
        if a.corpus.is_none() {
            cfg.corpus = None;
        }
    }
    if !a.patch_px.is_empty() {
        cfg.patch_sizes = a.patch_px.clone();
    }
    if let Some(e) = a.ensemble {
        cfg.ensemble_size = Some(e);
    }
    if let Some(t) = a.trials {
        cfg.trials = t;
    }
    if let Some(c) = a.classifier {
        cfg.classifier = c;
    }
    if let Some(c) = a.channel {
        cfg.channel = c;
    }
}

fn resolve(a: &ExpArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(p) => read_config(p)?,
        None => ExperimentConfig::default(),
    };
    apply_flags(&mut cfg, a);
    cfg.validate().map_err(|e| anyhow!("invalid config: {e}"))?;
    Ok(cfg)
}

fn init_pool(jobs: usize) {
    // Only the first call can size the global pool; later calls are no-ops.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build_global();
}

fn create_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

/// Load (or synthesize) and prepare the configured corpus, recording its manifest digest.
fn load_prepared(cfg: &ExperimentConfig, run: &mut Run) -> Result<PreparedCorpus> {
    if let Some(path) = &cfg.corpus {
        run.input(&manifest_path(path))?;
    }
    let corpus = cfg.load_corpus()?;
    log::info!("preparing {} paintings", corpus.paintings.len());
    Ok(prepare(&corpus, cfg.detrend, cfg.normalize)?)
}

fn record_seeds(run: &mut Run, cfg: &ExperimentConfig) {
    run.seeds.insert("seed".into(), cfg.seed);
    for t in 0..cfg.trials {
        run.seeds.insert(format!("trial_{t}"), trial_seed(cfg, t));
    }
}

fn single_size(cfg: &ExperimentConfig, command: &str, default: Option<usize>) -> Result<usize> {
    match (cfg.patch_sizes.as_slice(), default) {
        ([s], _) => Ok(*s),
        ([], Some(d)) => Ok(d),
        _ => bail!("{command} needs exactly one --patch-px"),
    }
}

fn write(run: &mut Run, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    let path = run.out.join(name);
    if let Some(parent) = path.parent() {
        create_out(parent)?;
    }
    write_atomic(&path, bytes)?;
    run.output(path.clone());
    Ok(path)
}

fn config_value(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(cfg)?)
}

fn synth(a: SynthArgs) -> Result<RunManifest> {
    let seed = a.common.seed.unwrap_or(0);
    if a.paintings_per_artist < 3 {
        bail!("invalid config: paintings_per_artist must be >= 3");
    }
    init_pool(a.common.jobs.unwrap_or(1));
    let corpus = preset_corpus(a.preset, a.paintings_per_artist, seed)?;
    create_out(&a.common.out)?;
    let mut run = Run::new("synth", &a.common.out);
    run.seeds.insert("seed".into(), seed);
    let manifest = write_corpus(&corpus, &a.common.out)?;
    for e in &manifest.paintings {
        for f in [&e.height_file, &e.mask_file, &e.color_file] {
            run.output(a.common.out.join(f));
        }
    }
    run.output(a.common.out.join(CORPUS_MANIFEST));
    run.finish(serde_json::json!({
        "preset": a.preset,
        "paintings_per_artist": a.paintings_per_artist,
        "seed": seed,
    }))
}

fn ingest(a: IngestArgs) -> Result<RunManifest> {
    let cfg = match &a.config {
        Some(p) => read_config(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.normalize
        .validate()
        .map_err(|e| anyhow!("invalid config: {e}"))?;
    if cfg.detrend.radius_px < 1 {
        bail!("invalid config: detrend.radius_px must be >= 1");
    }
    let mut stems: Vec<String> = Vec::new();
    for input in &a.inputs {
        let stem = input
            .file_name()
            .and_then(|n| n.to_str())
            .map(|n| n.split('.').next().unwrap_or(n).to_string())
            .ok_or_else(|| anyhow!("cannot name outputs for {}", input.display()))?;
        if stems.contains(&stem) {
            bail!("two inputs share the stem '{stem}' and would write the same outputs");
        }
        stems.push(stem);
    }
    let maps = a
        .inputs
        .iter()
        .map(|p| load_heightmap(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    create_out(&a.common.out)?;
    let sources: Vec<PathBuf> = a
        .inputs
        .iter()
        .filter_map(|p| p.canonicalize().ok())
        .collect();
    for stem in &stems {
        for name in [
            format!("{stem}.relative.topo"),
            format!("{stem}.normalized.png"),
        ] {
            let target = a.common.out.join(&name);
            if target.canonicalize().is_ok_and(|t| sources.contains(&t)) {
                bail!("output {} would overwrite an input", target.display());
            }
        }
    }
    let mut run = Run::new("ingest", &a.common.out);
    for input in &a.inputs {
        run.input(input)?;
    }
    for (stem, map) in stems.iter().zip(&maps) {
        let rel = detrend(map, cfg.detrend)?;
        let norm = normalize(&rel, cfg.normalize)?;
        let rel_path = a.common.out.join(format!("{stem}.relative.topo"));
        save_heightmap(&rel, &rel_path, MapFormat::Topo)?;
        run.output(rel_path);
        let norm_map = HeightMap::from_grid(&norm.grid, map.pitch_um)?;
        let png = a.common.out.join(format!("{stem}.normalized.png"));
        save_heightmap(
            &norm_map,
            &png,
            MapFormat::Png16 {
                z_lo_um: 0.0,
                z_hi_um: 1.0,
            },
        )?;
        run.output(sidecar_path(&png));
        run.output(png);
    }
    run.finish(serde_json::json!({ "detrend": cfg.detrend, "normalize": cfg.normalize }))
}

fn patchify(a: ExpArgs) -> Result<RunManifest> {
    let cfg = resolve(&a)?;
    let patch = single_size(&cfg, "patchify", None)?;
    init_pool(cfg.jobs);
    let mut run = Run::new("patchify", &a.common.out);
    let prep = load_prepared(&cfg, &mut run)?;
    let split = point_split(&prep, &cfg, cfg.channel, patch, a.trial)?;
    create_out(&a.common.out)?;
    record_seeds(&mut run, &cfg);
    let mut csv =
        String::from("painting_id,artist_id,grid_row,grid_col,x0,y0,side_px,split,region\n");
    for (name, set) in [
        ("train", &split.train),
        ("validation", &split.validation),
        ("test", &split.test),
    ] {
        for p in set {
            let painting = prep.painting(&p.painting_id).expect("patch from corpus");
            let region = classify_region(p, &painting.mask, &cfg.region_thresholds)?;
            let region = serde_json::to_value(region)?;
            writeln!(
                csv,
                "{},{},{},{},{},{},{},{name},{}",
                p.painting_id,
                p.artist_id,
                p.grid_row,
                p.grid_col,
                p.origin_px.0,
                p.origin_px.1,
                p.source_side_px,
                region.as_str().unwrap_or_default()
            )?;
        }
    }
    write(&mut run, "patches.csv", csv.as_bytes())?;
    write(
        &mut run,
        "split.json",
        &serde_json::to_vec_pretty(&split.descriptor())?,
    )?;
    run.finish(config_value(&cfg)?)
}

fn emd(a: ExpArgs) -> Result<RunManifest> {
    let cfg = resolve(&a)?;
    init_pool(cfg.jobs);
    let mut run = Run::new("emd", &a.common.out);
    let prep = load_prepared(&cfg, &mut run)?;
    create_out(&a.common.out)?;
    let mut csv = String::from(
        "painting_id,artist_id,imf,mean_frequency_per_mm,length_mm,reconstruction_error\n",
    );
    for p in &prep.paintings {
        log::info!("decomposing {}", p.painting_id);
        let stack = p.imfs(&cfg.sift)?;
        let err = stack.relative_reconstruction_error(&p.relative);
        for (k, imf) in stack.imfs.iter().enumerate() {
            let path =
                a.common
                    .out
                    .join("imfs")
                    .join(format!("{}.imf{}.topo", p.painting_id, k + 1));
            create_out(path.parent().expect("has parent"))?;
            save_heightmap(
                &HeightMap::from_grid(imf, p.pitch_um)?,
                &path,
                MapFormat::Topo,
            )?;
            run.output(path);
            let est = length_scale(imf, p.pitch_um, k + 1)?;
            writeln!(
                csv,
                "{},{},{},{:.6},{:.6},{:.3e}",
                p.painting_id,
                p.artist_id,
                k + 1,
                est.mean_frequency,
                est.length_mm,
                err
            )?;
        }
        let path = a
            .common
            .out
            .join("imfs")
            .join(format!("{}.residual.topo", p.painting_id));
        save_heightmap(
            &HeightMap::from_grid(&stack.residual, p.pitch_um)?,
            &path,
            MapFormat::Topo,
        )?;
        run.output(path);
    }
    write(&mut run, "length_scales.csv", csv.as_bytes())?;
    run.finish(config_value(&cfg)?)
}

fn write_point(run: &mut Run, point: &ModelPoint) -> Result<()> {
    write(run, POINT_JSON, &serde_json::to_vec_pretty(point)?)?;
    Ok(())
}

fn fit_mle(a: ExpArgs) -> Result<RunManifest> {
    let cfg = resolve(&a)?;
    let patch = single_size(&cfg, "fit-mle", Some(100))?;
    init_pool(cfg.jobs);
    let mut run = Run::new("fit-mle", &a.common.out);
    let prep = load_prepared(&cfg, &mut run)?;
    let tests = test_paintings(&prep, &cfg, a.trial)?;
    let models = fit_mle_models(&prep, &cfg, cfg.channel, &tests)?;
    create_out(&a.common.out)?;
    record_seeds(&mut run, &cfg);
    for m in &models {
        let mut buf = Vec::new();
        m.write_csv(&mut buf)?;
        write(
            &mut run,
            &format!("density_artist{}.csv", m.artist_id),
            &buf,
        )?;
    }
    write(&mut run, MODELS_JSON, &serde_json::to_vec(&models)?)?;
    write_point(
        &mut run,
        &ModelPoint {
            classifier: Classifier::Mle,
            channel: cfg.channel,
            patch_px: patch,
            trial: a.trial,
            test_paintings: tests,
            config: cfg.clone(),
        },
    )?;
    run.finish(config_value(&cfg)?)
}

fn train(a: ExpArgs) -> Result<RunManifest> {
    let cfg = resolve(&a)?;
    let patch = single_size(&cfg, "train", None)?;
    init_pool(cfg.jobs);
    let mut run = Run::new("train", &a.common.out);
    let prep = load_prepared(&cfg, &mut run)?;
    let split = point_split(&prep, &cfg, cfg.channel, patch, a.trial)?;
    let tests = split.test_painting_per_artist.clone();
    let descriptor = split.descriptor();
    let seed = ensemble_seed(trial_seed(&cfg, a.trial), cfg.channel, patch);
    let capped = capped_split(split.train, split.validation, &cfg, seed);
    log::info!(
        "training {} members on {} patches ({} validation)",
        cfg.ensemble_size_for(patch),
        capped.train.len(),
        capped.validation.len()
    );
    let (ensemble, trained) = train_point(&capped, &cfg, cfg.channel, patch, seed)?;
    create_out(&a.common.out)?;
    record_seeds(&mut run, &cfg);
    run.seeds.insert("ensemble".into(), seed);
    let dir = a.common.out.join(ENSEMBLE_DIR);
    save_ensemble(&dir, &ensemble)?;
    run.outputs(
        std::fs::read_dir(&dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()?,
    );
    for (i, t) in trained.iter().enumerate() {
        let path = a.common.out.join("logs").join(format!("member_{i:03}.csv"));
        create_out(path.parent().expect("has parent"))?;
        write_epoch_log(&path, &t.log)?;
        run.output(path);
    }
    write(
        &mut run,
        "split.json",
        &serde_json::to_vec_pretty(&descriptor)?,
    )?;
    write_point(
        &mut run,
        &ModelPoint {
            classifier: Classifier::Cnn,
            channel: cfg.channel,
            patch_px: patch,
            trial: a.trial,
            test_paintings: tests,
            config: cfg.clone(),
        },
    )?;
    run.finish(config_value(&cfg)?)
}

fn read_point(model: &Path) -> Result<ModelPoint> {
    let path = model.join(POINT_JSON);
    let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

/// The model's stored config with corpus and worker flags applied.
fn model_config(a: &ModelArgs, point: &ModelPoint) -> Result<ExperimentConfig> {
    let mut cfg = point.config.clone();
    if let Some(c) = &a.exp.corpus {
        cfg.corpus = Some(c.clone());
    }
    if let Some(p) = a.exp.preset {
        cfg.preset = Some(p);
        if a.exp.corpus.is_none() {
            cfg.corpus = None;
        }
    }
    if let Some(j) = a.exp.common.jobs {
        cfg.jobs = j;
    }
    cfg.test_paintings = Some(point.test_paintings.clone());
    cfg.validate().map_err(|e| anyhow!("invalid config: {e}"))?;
    Ok(cfg)
}

enum Loaded {
    Cnn(brushforge::convnet::EnsembleModel),
    Mle(Vec<DensityModel>),
}

fn load_model(model: &Path, point: &ModelPoint, run: &mut Run) -> Result<Loaded> {
    run.input(&model.join(POINT_JSON))?;
    match point.classifier {
        Classifier::Cnn => {
            let dir = model.join(ENSEMBLE_DIR);
            let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            files.sort();
            for f in &files {
                run.input(f)?;
            }
            Ok(Loaded::Cnn(load_ensemble(&dir)?))
        }
        Classifier::Mle => {
            let path = model.join(MODELS_JSON);
            run.input(&path)?;
            let bytes = std::fs::read(&path)?;
            Ok(Loaded::Mle(serde_json::from_slice(&bytes)?))
        }
        Classifier::Both => bail!(
            "{} names no single classifier",
            model.join(POINT_JSON).display()
        ),
    }
}

fn eval(a: ModelArgs) -> Result<RunManifest> {
    let point = read_point(&a.model)?;
    let cfg = model_config(&a, &point)?;
    init_pool(cfg.jobs);
    let mut run = Run::new("eval", &a.exp.common.out);
    let model = load_model(&a.model, &point, &mut run)?;
    let prep = load_prepared(&cfg, &mut run)?;
    let predictions = match &model {
        Loaded::Cnn(ens) => {
            let split = point_split(&prep, &cfg, point.channel, point.patch_px, point.trial)?;
            if split
                .test
                .first()
                .is_some_and(|p| p.side != ens.config.input_side_px)
            {
                bail!(
                    "model input side {} does not match the configured patches",
                    ens.config.input_side_px
                );
            }
            evaluate_ensemble(ens, &split.test)?
        }
        Loaded::Mle(models) => evaluate_mle(
            &prep,
            &cfg,
            models,
            point.channel,
            &point.test_paintings,
            point.patch_px,
        )?,
    };
    let cm = confusion(&predictions)?;
    let report = scores(&cm)?;
    create_out(&a.exp.common.out)?;
    let config_id = format!("{}-{}", point.classifier.name(), point.channel);
    let csv = format!(
        "{SCORE_CSV_HEADER}\n{}\n",
        report.csv_row(&config_id, point.patch_px)
    );
    write(&mut run, "metrics.csv", csv.as_bytes())?;
    let mut cm_csv = String::from("true,pred_1,pred_2,pred_3,pred_4\n");
    for (i, row) in cm.counts.iter().enumerate() {
        writeln!(
            cm_csv,
            "{},{},{},{},{}",
            i + 1,
            row[0],
            row[1],
            row[2],
            row[3]
        )?;
    }
    write(&mut run, "confusion.csv", cm_csv.as_bytes())?;
    write(
        &mut run,
        "metrics.json",
        &serde_json::to_vec_pretty(&report)?,
    )?;
    run.finish(config_value(&cfg)?)
}

fn render_map(a: RenderArgs) -> Result<RunManifest> {
    let point = read_point(&a.model.model)?;
    let cfg = model_config(&a.model, &point)?;
    init_pool(cfg.jobs);
    let mut run = Run::new("render-map", &a.model.exp.common.out);
    let model = load_model(&a.model.model, &point, &mut run)?;
    let prep = load_prepared(&cfg, &mut run)?;
    let ids: Vec<String> = if a.paintings.is_empty() {
        point.test_paintings.values().cloned().collect()
    } else {
        a.paintings.clone()
    };
    let mut maps = Vec::new();
    for id in &ids {
        let painting = prep
            .painting(id)
            .ok_or_else(|| anyhow!("painting {id} is not in the corpus"))?;
        let map_model = match &model {
            Loaded::Cnn(ens) => MapModel::Ensemble(ens),
            Loaded::Mle(models) => MapModel::Mle(models),
        };
        let map = attribution_map(painting, map_model, point.channel, point.patch_px, &cfg)?;
        maps.push((render_attribution_map(&painting.height, &map)?, map));
    }
    create_out(&a.model.exp.common.out)?;
    for (png, map) in maps {
        write(&mut run, &format!("maps/{}.png", map.painting_id), &png)?;
        write(
            &mut run,
            &format!("maps/{}.csv", map.painting_id),
            write_map_csv(&map).as_bytes(),
        )?;
    }
    run.finish(config_value(&cfg)?)
}

fn sweep_patch(a: ExpArgs) -> Result<RunManifest> {
    let cfg = resolve(&a)?;
    init_pool(cfg.jobs);
    let mut run = Run::new("sweep-patch", &a.common.out);
    let prep = load_prepared(&cfg, &mut run)?;
    let table = patch_size_sweep(&prep, &cfg)?;
    record_seeds(&mut run, &cfg);
    run.outputs(write_sweep(&table, &a.common.out)?);
    run.finish(config_value(&cfg)?)
}

fn sweep_imf(a: ImfArgs) -> Result<RunManifest> {
    let cfg = resolve(&a.exp)?;
    init_pool(cfg.jobs);
    let mut run = Run::new("sweep-imf", &a.exp.common.out);
    let prep = load_prepared(&cfg, &mut run)?;
    let table = imf_sweep(&prep, &cfg, &a.imfs)?;
    record_seeds(&mut run, &cfg);
    run.outputs(write_sweep(&table, &a.exp.common.out)?);
    run.finish(config_value(&cfg)?)
}

fn cross_region(a: ExpArgs) -> Result<RunManifest> {
    let cfg = resolve(&a)?;
    let patch = single_size(&cfg, "cross-region", Some(100))?;
    init_pool(cfg.jobs);
    let mut run = Run::new("cross-region", &a.common.out);
    let prep = load_prepared(&cfg, &mut run)?;
    let result = cross_region_experiment(&prep, &cfg, patch)?;
    record_seeds(&mut run, &cfg);
    run.outputs(write_cross_region(&result, &a.common.out)?);
    run.finish(config_value(&cfg)?)
}
