//! Patch-size, IMF and cross-region studies plus attribution maps.

mod plot;
mod render;
mod runs;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::convnet::{NetConfig, TrainSchedule};
use crate::emd::{decompose, ImfStack, SiftParams};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::patching::{ChannelKind, RegionThresholds};
use crate::surface::{detrend, normalize, DetrendParams, NormalizeParams};
use crate::synth::{load_corpus, preset_corpus, Corpus, Preset};

pub use plot::{bar_chart, line_chart, BarGroup, Series, SERIES_COLORS};
pub use render::{
    attribution_map, render_attribution_map, write_map_csv, AttributionMap, MapCell, MapModel,
    ARTIST_COLORS, MAP_CSV_HEADER,
};
pub use runs::{
    capped_split, corpus_patches, cross_region_experiment, ensemble_seed, evaluate_ensemble,
    evaluate_mle, fit_mle_models, imf_sweep, patch_size_sweep, point_split, run_point,
    test_paintings, train_point, trial_seed, write_cross_region, write_sweep, CrossRegionResult,
    CrossRegionRow, Direction, PointResult, SweepRow, SweepTable, CROSS_REGION_CSV_HEADER,
    SWEEP_CSV, SWEEP_JSON,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Classifier {
    Cnn,
    Mle,
    Both,
}

impl Classifier {
    /// The concrete classifiers this selection runs.
    pub fn members(&self) -> Vec<Classifier> {
        match self {
            Classifier::Both => vec![Classifier::Cnn, Classifier::Mle],
            c => vec![*c],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Classifier::Cnn => "cnn",
            Classifier::Mle => "mle",
            Classifier::Both => "both",
        }
    }
}

impl std::str::FromStr for Classifier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(Classifier::Cnn),
            "mle" => Ok(Classifier::Mle),
            "both" => Ok(Classifier::Both),
            _ => Err(Error::invalid(format!(
                "unknown classifier '{s}' (expected cnn, mle or both)"
            ))),
        }
    }
}

/// Network shape shared by every point; the input side follows the patch size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetTemplate {
    pub conv_filters: Vec<usize>,
    pub kernel_px: usize,
    pub dense_units: usize,
    pub dropout_rate: f64,
    pub l2_factor: f64,
    pub max_input_side_px: usize,
    pub standardize_inputs: bool,
}

impl Default for NetTemplate {
    fn default() -> Self {
        let c = NetConfig::default();
        NetTemplate {
            conv_filters: c.conv_filters,
            kernel_px: c.kernel_px,
            dense_units: c.dense_units,
            dropout_rate: c.dropout_rate,
            l2_factor: c.l2_factor,
            max_input_side_px: c.input_side_px,
            standardize_inputs: c.standardize_inputs,
        }
    }
}

impl NetTemplate {
    pub fn compact() -> Self {
        let c = NetConfig::compact(32);
        NetTemplate {
            conv_filters: c.conv_filters,
            dense_units: c.dense_units,
            max_input_side_px: 32,
            ..NetTemplate::default()
        }
    }

    /// Input side for a patch: nearest multiple of the pooling factor,
    /// clamped to `[factor, max_input_side_px]`.
    pub fn input_side_for(&self, patch_px: usize) -> usize {
        let factor = 1usize << self.conv_filters.len();
        let lo = factor.max(8);
        let rounded = ((patch_px as f64 / factor as f64).round() as usize).max(1) * factor;
        let hi = (self.max_input_side_px / factor) * factor;
        rounded.clamp(lo, hi.max(lo))
    }

    pub fn net_config(&self, patch_px: usize, in_channels: usize) -> NetConfig {
        NetConfig {
            input_side_px: self.input_side_for(patch_px),
            in_channels,
            conv_filters: self.conv_filters.clone(),
            kernel_px: self.kernel_px,
            dense_units: self.dense_units,
            dropout_rate: self.dropout_rate,
            l2_factor: self.l2_factor,
            classes: 4,
            standardize_inputs: self.standardize_inputs,
        }
    }
}

/// Patch sizes of the original 2400-px-wide scans.
pub const FULL_SCALE_LADDER: [usize; 10] = [10, 20, 50, 100, 200, 300, 400, 600, 800, 1200];

/// The ladder scaled to a `width × height` corpus, no smaller than 10 px and
/// no larger than a fifth of the painting's area.
pub fn scaled_ladder(width: usize, height: usize) -> Vec<usize> {
    let scale = width.min(height) as f64 / 2400.0;
    let largest = ((width * height) as f64 / 5.0).sqrt().floor() as usize;
    let mut out: Vec<usize> = FULL_SCALE_LADDER
        .iter()
        .map(|&s| ((s as f64 * scale).round() as usize).clamp(10, largest.max(10)))
        .collect();
    out.dedup();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Corpus manifest (or its directory).
    pub corpus: Option<PathBuf>,
    /// Synthesize this preset from `seed` when no corpus path is given.
    pub preset: Option<Preset>,
    pub paintings_per_artist: usize,
    /// Empty means the scaled ladder for the corpus.
    pub patch_sizes: Vec<usize>,
    /// Members per ensemble; `None` uses 10 at ≤10 px and 20 above.
    pub ensemble_size: Option<usize>,
    pub trials: usize,
    pub seed: u64,
    pub classifier: Classifier,
    pub channel: ChannelKind,
    pub net: NetTemplate,
    pub schedule: TrainSchedule,
    pub validation_fraction: f64,
    /// Random subsample of training patches per artist (validation scaled alike).
    pub max_train_patches_per_artist: Option<usize>,
    pub detrend: DetrendParams,
    pub normalize: NormalizeParams,
    pub sift: SiftParams,
    pub region_thresholds: RegionThresholds,
    /// Fixed held-out painting per artist; `None` draws one per trial.
    pub test_paintings: Option<BTreeMap<u8, String>>,
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: None,
            preset: None,
            paintings_per_artist: 3,
            patch_sizes: Vec::new(),
            ensemble_size: None,
            trials: 3,
            seed: 0,
            classifier: Classifier::Both,
            channel: ChannelKind::Height,
            net: NetTemplate::default(),
            schedule: TrainSchedule::default(),
            validation_fraction: 0.1,
            max_train_patches_per_artist: None,
            detrend: DetrendParams::default(),
            normalize: NormalizeParams::default(),
            sift: SiftParams::default(),
            region_thresholds: RegionThresholds::default(),
            test_paintings: None,
            jobs: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::invalid("trials must be >= 1"));
        }
        if self.patch_sizes.contains(&0) {
            return Err(Error::invalid("patch sizes must be >= 1"));
        }
        if self.ensemble_size == Some(0) {
            return Err(Error::invalid("ensemble_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) || self.validation_fraction == 0.0 {
            return Err(Error::invalid("validation_fraction must lie in (0, 1)"));
        }
        if self.paintings_per_artist < 3 {
            return Err(Error::invalid("paintings_per_artist must be >= 3"));
        }
        if self.jobs == 0 {
            return Err(Error::invalid("jobs must be >= 1"));
        }
        if self.max_train_patches_per_artist == Some(0) {
            return Err(Error::invalid("max_train_patches_per_artist must be >= 1"));
        }
        self.net.net_config(32, 1).validate()?;
        self.schedule.validate()?;
        self.normalize.validate()?;
        self.sift.validate()?;
        Ok(())
    }

    /// The configured corpus: loaded from `corpus`, else synthesized from `preset`.
    pub fn load_corpus(&self) -> Result<Corpus> {
        match (&self.corpus, self.preset) {
            (Some(path), _) => load_corpus(path),
            (None, Some(preset)) => preset_corpus(preset, self.paintings_per_artist, self.seed),
            (None, None) => Err(Error::invalid("config needs a corpus path or a preset")),
        }
    }

    pub fn ensemble_size_for(&self, patch_px: usize) -> usize {
        self.ensemble_size
            .unwrap_or(if patch_px <= 10 { 10 } else { 20 })
    }

    pub fn sizes_for(&self, width: usize, height: usize) -> Vec<usize> {
        if self.patch_sizes.is_empty() {
            scaled_ladder(width, height)
        } else {
            self.patch_sizes.clone()
        }
    }
}

/// A painting after detrending and normalization, with lazily computed IMFs.
#[derive(Debug)]
pub struct PreparedPainting {
    pub painting_id: String,
    pub artist_id: u8,
    pub pitch_um: f64,
    /// Relative heights in microns.
    pub relative: Grid,
    /// Normalized heights in `[0, 1]`.
    pub height: Grid,
    pub mask: Grid,
    pub color: [Grid; 3],
    imfs: OnceLock<std::result::Result<ImfStack, String>>,
}

impl PreparedPainting {
    /// Decompose the relative-height map on first use.
    pub fn imfs(&self, sift: &SiftParams) -> Result<&ImfStack> {
        self.imfs
            .get_or_init(|| decompose(&self.relative, sift).map_err(|e| e.to_string()))
            .as_ref()
            .map_err(|e| {
                Error::Degenerate(format!("decomposition of {} failed: {e}", self.painting_id))
            })
    }

    pub fn channel_grids(&self, kind: ChannelKind, sift: &SiftParams) -> Result<Vec<&Grid>> {
        match kind {
            ChannelKind::Height => Ok(vec![&self.height]),
            ChannelKind::PseudoColor => Ok(self.color.iter().collect()),
            ChannelKind::Imf(k) => {
                let stack = self.imfs(sift)?;
                stack.imfs.get(k - 1).map(|g| vec![g]).ok_or_else(|| {
                    Error::invalid(format!(
                        "{} has {} IMFs; IMF {k} unavailable",
                        self.painting_id,
                        stack.imfs.len()
                    ))
                })
            }
        }
    }
}

#[derive(Debug)]
pub struct PreparedCorpus {
    pub paintings: Vec<PreparedPainting>,
    pub width: usize,
    pub height: usize,
}

impl PreparedCorpus {
    pub fn painting(&self, id: &str) -> Option<&PreparedPainting> {
        self.paintings.iter().find(|p| p.painting_id == id)
    }

    /// Painting ids per artist, sorted.
    pub fn ids_by_artist(&self) -> BTreeMap<u8, Vec<String>> {
        let mut out: BTreeMap<u8, Vec<String>> = BTreeMap::new();
        for p in &self.paintings {
            out.entry(p.artist_id)
                .or_default()
                .push(p.painting_id.clone());
        }
        for ids in out.values_mut() {
            ids.sort();
        }
        out
    }
}

/// Detrend and normalize every painting of a corpus.
pub fn prepare(
    corpus: &Corpus,
    detrend_params: DetrendParams,
    norm: NormalizeParams,
) -> Result<PreparedCorpus> {
    use rayon::prelude::*;
    let first = corpus
        .paintings
        .first()
        .ok_or_else(|| Error::invalid("corpus has no paintings"))?;
    let (width, height) = (first.data.height.width_px, first.data.height.height_px);
    let paintings = corpus
        .paintings
        .par_iter()
        .map(|p| {
            if (p.data.height.width_px, p.data.height.height_px) != (width, height) {
                return Err(Error::ShapeMismatch {
                    expected: format!("{width}x{height} paintings"),
                    actual: format!(
                        "{} is {}x{}",
                        p.painting_id, p.data.height.width_px, p.data.height.height_px
                    ),
                });
            }
            let rel = detrend(&p.data.height, detrend_params)?;
            let normalized = normalize(&rel, norm)?;
            Ok(PreparedPainting {
                painting_id: p.painting_id.clone(),
                artist_id: p.artist_id,
                pitch_um: p.data.height.pitch_um,
                relative: rel.to_grid(),
                height: normalized.grid,
                mask: p.data.mask.clone(),
                color: p.data.color.clone(),
                imfs: OnceLock::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedCorpus {
        paintings,
        width,
        height,
    })
}

#[cfg(test)]
mod tests;
