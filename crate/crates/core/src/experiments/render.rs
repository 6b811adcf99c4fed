use serde::{Deserialize, Serialize};

use super::runs::{mle_scores, mle_source};
use super::{ExperimentConfig, PreparedPainting};
use crate::convnet::{ensemble_predict, pack_patches, EnsembleModel, ProbVector};
use crate::density::DensityModel;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::patching::{patchify_source, ChannelKind, PatchSource, PatchSpec};
use crate::synth::encode_png;

/// Overlay colors for artists 1..4: red, orange, green, blue.
pub const ARTIST_COLORS: [[u8; 3]; 4] =
    [[214, 39, 40], [255, 127, 14], [44, 160, 44], [31, 119, 180]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapCell {
    pub row: usize,
    pub col: usize,
    pub x0: usize,
    pub y0: usize,
    pub side: usize,
    pub probs: ProbVector,
}

impl MapCell {
    pub fn winner(&self) -> u8 {
        self.probs.argmax()
    }

    pub fn confidence(&self) -> f64 {
        self.probs.max()
    }

    /// Confidence mapped from the 4-class chance floor: 0.25 → 0, 1 → 1.
    pub fn alpha(&self) -> f64 {
        ((self.confidence() - 0.25) / 0.75).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub painting_id: String,
    pub artist_id: u8,
    pub patch_px: usize,
    pub width: usize,
    pub height: usize,
    pub cells: Vec<MapCell>,
}

/// Either classifier can drive a map.
#[derive(Debug, Clone, Copy)]
pub enum MapModel<'a> {
    Ensemble(&'a EnsembleModel),
    Mle(&'a [DensityModel]),
}

/// Per-patch probabilities over a painting's patch grid.
pub fn attribution_map(
    painting: &PreparedPainting,
    model: MapModel<'_>,
    channel: ChannelKind,
    patch_px: usize,
    config: &ExperimentConfig,
) -> Result<AttributionMap> {
    let cells = match model {
        MapModel::Ensemble(ens) => {
            if ens.config.in_channels != channel.channels() {
                return Err(Error::invalid(format!(
                    "ensemble expects {} input channels, {channel} has {}",
                    ens.config.in_channels,
                    channel.channels()
                )));
            }
            let src = PatchSource {
                painting_id: &painting.painting_id,
                artist_id: painting.artist_id,
                pitch_um: painting.pitch_um,
                kind: channel,
                channels: painting.channel_grids(channel, &config.sift)?,
            };
            let patches =
                patchify_source(&src, &PatchSpec::new(patch_px, ens.config.input_side_px))?;
            let (x, _) = pack_patches(&patches);
            let probs = ensemble_predict(ens, &x, patches.len())?;
            patches
                .iter()
                .zip(probs)
                .map(|(p, probs)| MapCell {
                    row: p.grid_row,
                    col: p.grid_col,
                    x0: p.origin_px.0,
                    y0: p.origin_px.1,
                    side: patch_px,
                    probs,
                })
                .collect()
        }
        MapModel::Mle(models) => {
            let grid = mle_source(painting, channel, config)?;
            mle_scores(grid, patch_px, models)?
                .into_iter()
                .map(|(c, score)| {
                    let mut probs = [0.0; 4];
                    for (m, p) in models.iter().zip(score.posterior()) {
                        probs[usize::from(m.artist_id - 1)] = p;
                    }
                    MapCell {
                        row: c.row,
                        col: c.col,
                        x0: c.x0,
                        y0: c.y0,
                        side: patch_px,
                        probs: ProbVector(probs),
                    }
                })
                .collect()
        }
    };
    Ok(AttributionMap {
        painting_id: painting.painting_id.clone(),
        artist_id: painting.artist_id,
        patch_px,
        width: painting.height.width,
        height: painting.height.height,
        cells,
    })
}

/// Grayscale `base` (values in `[0, 1]`) with each patch blended toward its
/// winner's color at the patch's alpha. Returns RGBA PNG bytes with the
/// dimensions of `base`.
pub fn render_attribution_map(base: &Grid, map: &AttributionMap) -> Result<Vec<u8>> {
    if (base.width, base.height) != (map.width, map.height) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{} base image", map.width, map.height),
            actual: format!("{}x{}", base.width, base.height),
        });
    }
    let mut rgba = Vec::with_capacity(base.len() * 4);
    for &v in &base.data {
        let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        rgba.extend_from_slice(&[g, g, g, 255]);
    }
    for cell in &map.cells {
        let color = ARTIST_COLORS[usize::from(cell.winner() - 1)];
        let a = cell.alpha();
        for y in cell.y0..(cell.y0 + cell.side).min(map.height) {
            for x in cell.x0..(cell.x0 + cell.side).min(map.width) {
                let i = (y * map.width + x) * 4;
                for c in 0..3 {
                    let g = f64::from(rgba[i + c]);
                    rgba[i + c] = ((1.0 - a) * g + a * f64::from(color[c])).round() as u8;
                }
            }
        }
    }
    encode_png(map.width, map.height, image::ColorType::Rgba8, &rgba)
}

pub const MAP_CSV_HEADER: &str = "row,col,x0,y0,side,winner,confidence,p1,p2,p3,p4";

pub fn write_map_csv(map: &AttributionMap) -> String {
    let mut s = String::from(MAP_CSV_HEADER);
    s.push('\n');
    for c in &map.cells {
        let p = c.probs.0;
        s.push_str(&format!(
            "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            c.row,
            c.col,
            c.x0,
            c.y0,
            c.side,
            c.winner(),
            c.confidence(),
            p[0],
            p[1],
            p[2],
            p[3]
        ));
    }
    s
}
