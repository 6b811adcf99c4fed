//! Synthetic brushwork: height maps, foreground masks and pseudo-color maps
//! with known authorship.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::seed::{derive_seed, rng_for};
use crate::surface::{self, detrend, DetrendParams, HeightMap, DEFAULT_PITCH_UM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtistProfile {
    pub name: String,
    pub bristle_diameter_mm: f64,
    pub stroke_width_mm: f64,
    pub stroke_length_mm_mean: f64,
    pub stroke_length_mm_sd: f64,
    /// Mean stroke direction, degrees from the +x axis (axial, mod 180).
    pub orientation_mean_deg: f64,
    pub orientation_concentration: f64,
    pub strokes_per_cm2: f64,
    pub ridge_amplitude_um: f64,
    /// Relative depth `a` of the bristle striations, `1 + a·cos(2πu/d)`.
    pub striation_depth: f64,
    /// In `[-1, 1]`; positive values favour raised strokes (tail above the mean).
    pub height_skew: f64,
    pub micro_noise_um: f64,
    pub seed_salt: u64,
}

impl ArtistProfile {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("bristle_diameter_mm", self.bristle_diameter_mm),
            ("stroke_width_mm", self.stroke_width_mm),
            ("stroke_length_mm_mean", self.stroke_length_mm_mean),
            ("ridge_amplitude_um", self.ridge_amplitude_um),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!(
                    "profile {}: {name} must be > 0",
                    self.name
                )));
            }
        }
        let non_negative = [
            ("stroke_length_mm_sd", self.stroke_length_mm_sd),
            ("orientation_concentration", self.orientation_concentration),
            ("strokes_per_cm2", self.strokes_per_cm2),
            ("micro_noise_um", self.micro_noise_um),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!(
                    "profile {}: {name} must be >= 0",
                    self.name
                )));
            }
        }
        if !(0.0..1.0).contains(&self.striation_depth) {
            return Err(Error::invalid(format!(
                "profile {}: striation_depth must lie in [0, 1)",
                self.name
            )));
        }
        if !(-1.0..=1.0).contains(&self.height_skew) {
            return Err(Error::invalid(format!(
                "profile {}: height_skew must lie in [-1, 1]",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stencil {
    /// Five-petalled blob covering a little over half the canvas.
    LilyBlob,
    /// No foreground.
    Blank,
}

/// sRGB fill colors per artist (index 0 is artist 1) for each region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub background: [[u8; 3]; 4],
    pub foreground: [[u8; 3]; 4],
    /// Brightness modulation by the stroke relief, as a fraction of the fill.
    pub shading: f64,
}

impl Palette {
    /// Every artist uses the same dark-green background and yellow foreground.
    pub fn shared() -> Self {
        Palette {
            background: [[28, 56, 34]; 4],
            foreground: [[232, 190, 60]; 4],
            shading: 0.15,
        }
    }

    /// Per-artist colors whose brightness ordering is scrambled between the
    /// dark green/black background and the yellow/red foreground.
    pub fn divergent() -> Self {
        Palette {
            background: [[12, 20, 14], [24, 48, 30], [36, 76, 40], [52, 104, 56]],
            foreground: [
                [250, 214, 70],
                [196, 40, 32],
                [236, 120, 40],
                [220, 170, 50],
            ],
            shading: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanvasSpec {
    pub width_px: usize,
    pub height_px: usize,
    pub pitch_um: f64,
    /// Peak-to-centre height of the paraboloid canvas bow.
    pub bow_um: f64,
    pub stencil: Stencil,
    pub palette: Palette,
}

impl Default for CanvasSpec {
    fn default() -> Self {
        CanvasSpec {
            width_px: 600,
            height_px: 750,
            pitch_um: DEFAULT_PITCH_UM,
            bow_um: 2000.0,
            stencil: Stencil::LilyBlob,
            palette: Palette::shared(),
        }
    }
}

impl CanvasSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width_px < 64 || self.height_px < 64 {
            return Err(Error::invalid("canvas dimensions must be >= 64 px"));
        }
        if !(self.pitch_um > 0.0) || !self.bow_um.is_finite() {
            return Err(Error::invalid("canvas pitch must be > 0 and bow finite"));
        }
        if !(0.0..1.0).contains(&self.palette.shading) {
            return Err(Error::invalid("palette shading must lie in [0, 1)"));
        }
        Ok(())
    }

    fn mm_to_px(&self, mm: f64) -> f64 {
        mm * 1000.0 / self.pitch_um
    }
}

/// One generated painting. `mask` holds 1 on the foreground, 0 elsewhere;
/// `color` holds RGB planes quantized to multiples of 1/255.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPainting {
    pub height: HeightMap,
    pub mask: Grid,
    pub color: [Grid; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Painting {
    pub painting_id: String,
    pub artist_id: u8,
    pub seed: u64,
    pub data: SynthPainting,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub paintings: Vec<Painting>,
    pub seed: u64,
    pub profiles: Vec<ArtistProfile>,
    pub canvas: CanvasSpec,
    pub preset: Option<String>,
}

impl Corpus {
    pub fn artists(&self) -> Vec<u8> {
        let mut ids: Vec<u8> = self.paintings.iter().map(|p| p.artist_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn paintings_of(&self, artist_id: u8) -> impl Iterator<Item = &Painting> {
        self.paintings
            .iter()
            .filter(move |p| p.artist_id == artist_id)
    }

    pub fn painting(&self, painting_id: &str) -> Option<&Painting> {
        self.paintings.iter().find(|p| p.painting_id == painting_id)
    }
}

/// Axial von Mises sample (Best–Fisher) around `mean` with concentration `kappa`.
fn von_mises(rng: &mut ChaCha8Rng, mean: f64, kappa: f64) -> f64 {
    if kappa < 1e-8 {
        return rng.gen_range(-PI..PI);
    }
    let tau = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * kappa);
    let r = (1.0 + rho * rho) / (2.0 * rho);
    loop {
        let u1: f64 = rng.gen();
        let z = (PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = kappa * (r - f);
        let u2: f64 = rng.gen();
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let u3: f64 = rng.gen();
            let theta = if u3 > 0.5 { f.acos() } else { -f.acos() };
            return mean + theta;
        }
    }
}

struct Stroke {
    cx: f64,
    cy: f64,
    angle: f64,
    sigma_u: f64,
    sigma_v: f64,
    amplitude: f64,
    period: f64,
    phase: f64,
}

fn stamp(relief: &mut Grid, s: &Stroke, depth: f64) {
    let (sin, cos) = s.angle.sin_cos();
    let hu = 3.0 * s.sigma_u;
    let hv = 3.0 * s.sigma_v;
    let ex = (hv * cos).abs() + (hu * sin).abs();
    let ey = (hv * sin).abs() + (hu * cos).abs();
    let x0 = (s.cx - ex).floor().max(0.0) as usize;
    let y0 = (s.cy - ey).floor().max(0.0) as usize;
    let x1 = ((s.cx + ex).ceil() as isize).min(relief.width as isize - 1);
    let y1 = ((s.cy + ey).ceil() as isize).min(relief.height as isize - 1);
    if x1 < x0 as isize || y1 < y0 as isize {
        return;
    }
    let (x1, y1) = (x1 as usize, y1 as usize);
    let inv_u = 1.0 / (2.0 * s.sigma_u * s.sigma_u);
    let inv_v = 1.0 / (2.0 * s.sigma_v * s.sigma_v);
    let k = 2.0 * PI / s.period;
    let w = relief.width;
    for y in y0..=y1 {
        let dy = y as f64 - s.cy;
        let row = &mut relief.data[y * w..(y + 1) * w];
        for (x, cell) in row.iter_mut().enumerate().take(x1 + 1).skip(x0) {
            let dx = x as f64 - s.cx;
            let v = dx * cos + dy * sin;
            let u = -dx * sin + dy * cos;
            if u.abs() > hu || v.abs() > hv {
                continue;
            }
            let env = (-(u * u) * inv_u - v * v * inv_v).exp();
            *cell += s.amplitude * env * (1.0 + depth * (k * u + s.phase).cos());
        }
    }
}

/// Foreground indicator of the stencil.
pub fn stencil_mask(stencil: Stencil, width: usize, height: usize) -> Grid {
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    Grid::from_fn(width, height, |x, y| match stencil {
        Stencil::Blank => 0.0,
        Stencil::LilyBlob => {
            let u = (x as f64 - cx) / (width as f64 / 2.0);
            let v = (y as f64 - cy) / (height as f64 / 2.0);
            let r = u.hypot(v);
            let theta = v.atan2(u);
            if r < 0.85 + 0.2 * (5.0 * theta + 0.3).cos() {
                1.0
            } else {
                0.0
            }
        }
    })
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Render one painting: stamped strokes plus micro-noise plus canvas bow.
pub fn synth_painting(
    profile: &ArtistProfile,
    artist_index: usize,
    canvas: &CanvasSpec,
    seed: u64,
) -> Result<SynthPainting> {
    profile.validate()?;
    canvas.validate()?;
    if artist_index >= 4 {
        return Err(Error::invalid("artist index must be 0..=3"));
    }
    let (w, h) = (canvas.width_px, canvas.height_px);
    let width_px = canvas.mm_to_px(profile.stroke_width_mm);
    let length_px = canvas.mm_to_px(profile.stroke_length_mm_mean);
    if width_px > w.min(h) as f64 || length_px > w.max(h) as f64 {
        return Err(Error::invalid(format!(
            "canvas {w}x{h} px is too small for {} strokes ({width_px:.0} x {length_px:.0} px)",
            profile.name
        )));
    }
    let mut rng = rng_for(seed, "strokes", 0);
    let mut relief = Grid::filled(w, h, 0.0);
    // Stroke centres range over a margin so edge coverage matches the interior.
    let margin = length_px / 2.0;
    let span_x = w as f64 + 2.0 * margin;
    let span_y = h as f64 + 2.0 * margin;
    let area_cm2 = span_x * span_y * (canvas.pitch_um * 1e-4).powi(2);
    let expected = profile.strokes_per_cm2 * area_cm2;
    let count = if expected > 0.0 {
        Poisson::new(expected)
            .expect("positive mean")
            .sample(&mut rng) as usize
    } else {
        0
    };
    let period = canvas.mm_to_px(profile.bristle_diameter_mm);
    let mean_angle = profile.orientation_mean_deg.to_radians();
    let length_dist = Normal::new(length_px, canvas.mm_to_px(profile.stroke_length_mm_sd))
        .expect("finite length");
    let p_raised = (1.0 + profile.height_skew) / 2.0;
    for _ in 0..count {
        let cx = rng.gen::<f64>() * span_x - margin;
        let cy = rng.gen::<f64>() * span_y - margin;
        // Axial orientation: sample the doubled angle, then halve.
        let angle = von_mises(
            &mut rng,
            2.0 * mean_angle,
            profile.orientation_concentration,
        ) / 2.0;
        let length = length_dist.sample(&mut rng).max(width_px);
        let jitter = rng.gen_range(0.75..1.25);
        let sign = if rng.gen::<f64>() < p_raised {
            1.0
        } else {
            -1.0
        };
        let phase = rng.gen_range(0.0..2.0 * PI);
        stamp(
            &mut relief,
            &Stroke {
                cx,
                cy,
                angle,
                sigma_u: width_px / 4.0,
                sigma_v: length / 4.0,
                amplitude: sign * jitter * profile.ridge_amplitude_um,
                period,
                phase,
            },
            profile.striation_depth,
        );
    }

    let mut noise_rng = rng_for(seed, "noise", 0);
    let noise = Normal::new(0.0, profile.micro_noise_um.max(0.0)).expect("finite noise");
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut heights = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 - cx) / cx.max(1.0);
            let v = (y as f64 - cy) / cy.max(1.0);
            let bow = canvas.bow_um * (u * u + v * v) / 2.0;
            let n = if profile.micro_noise_um > 0.0 {
                noise.sample(&mut noise_rng)
            } else {
                0.0
            };
            heights.push((relief.get(x, y) + n + bow) as f32);
        }
    }
    let height = HeightMap::new(w, h, canvas.pitch_um, heights)?;

    let mask = stencil_mask(canvas.stencil, w, h);
    let shade_ref = profile.ridge_amplitude_um.max(1.0);
    let mut color = [
        Grid::filled(w, h, 0.0),
        Grid::filled(w, h, 0.0),
        Grid::filled(w, h, 0.0),
    ];
    for i in 0..w * h {
        let fill = if mask.data[i] > 0.5 {
            canvas.palette.foreground[artist_index]
        } else {
            canvas.palette.background[artist_index]
        };
        let shade = 1.0 + canvas.palette.shading * (relief.data[i] / shade_ref).tanh();
        for c in 0..3 {
            color[c].data[i] = quantize(f64::from(fill[c]) / 255.0 * shade);
        }
    }
    Ok(SynthPainting {
        height,
        mask,
        color,
    })
}

/// Seed of painting `k` of artist `i`; the profile salt enters last so
/// changing one artist's salt leaves every other painting unchanged.
pub fn painting_seed(seed: u64, artist_index: usize, painting_index: usize, salt: u64) -> u64 {
    let base = derive_seed(
        seed,
        "painting",
        (artist_index as u64) << 32 | painting_index as u64,
    );
    derive_seed(base, "salt", salt)
}

pub fn painting_id(artist_id: u8, painting_index: usize) -> String {
    format!("artist{artist_id}_p{}", painting_index + 1)
}

pub fn make_corpus(
    profiles: &[ArtistProfile],
    canvas: &CanvasSpec,
    paintings_per_artist: usize,
    seed: u64,
) -> Result<Corpus> {
    if profiles.len() != 4 {
        return Err(Error::invalid(format!(
            "a corpus needs 4 artist profiles, got {}",
            profiles.len()
        )));
    }
    if paintings_per_artist == 0 {
        return Err(Error::invalid("paintings_per_artist must be >= 1"));
    }
    let jobs: Vec<(usize, usize)> = (0..4)
        .flat_map(|i| (0..paintings_per_artist).map(move |k| (i, k)))
        .collect();
    let paintings = jobs
        .par_iter()
        .map(|&(i, k)| {
            let artist_id = i as u8 + 1;
            let pseed = painting_seed(seed, i, k, profiles[i].seed_salt);
            let id = painting_id(artist_id, k);
            let mut data = synth_painting(&profiles[i], i, canvas, pseed)?;
            data.height = data
                .height
                .with_meta("painting_id", id.clone())
                .with_meta("artist_id", artist_id.to_string());
            Ok(Painting {
                painting_id: id,
                artist_id,
                seed: pseed,
                data,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        paintings,
        seed,
        profiles: profiles.to_vec(),
        canvas: canvas.clone(),
        preset: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Distinct widths, densities, skews and bristles.
    Separable,
    /// Identical height kernels; artists differ only in orientation and striation period.
    MatchedMarginals,
    /// Artists differ only in bristle-scale striations.
    StriationOnly,
    /// Separable textures with per-artist colors scrambled between regions.
    PaletteDivergent,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::Separable,
        Preset::MatchedMarginals,
        Preset::StriationOnly,
        Preset::PaletteDivergent,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Separable => "separable",
            Preset::MatchedMarginals => "matched-marginals",
            Preset::StriationOnly => "striation-only",
            Preset::PaletteDivergent => "palette-divergent",
        }
    }

    pub fn profiles(&self) -> Vec<ArtistProfile> {
        let base = ArtistProfile {
            name: String::new(),
            bristle_diameter_mm: 0.4,
            stroke_width_mm: 1.5,
            stroke_length_mm_mean: 8.0,
            stroke_length_mm_sd: 2.0,
            orientation_mean_deg: 0.0,
            orientation_concentration: 0.0,
            strokes_per_cm2: 30.0,
            ridge_amplitude_um: 50.0,
            striation_depth: 0.35,
            height_skew: -0.3,
            micro_noise_um: 2.0,
            seed_salt: 0,
        };
        let named = |i: usize, p: ArtistProfile| ArtistProfile {
            name: format!("artist{}", i + 1),
            ..p
        };
        match self {
            Preset::Separable | Preset::PaletteDivergent => {
                let specs = [
                    // bristle, width, length, sd, orient, kappa, density, amp, depth, skew, noise
                    (0.25, 1.0, 6.0, 2.0, 30.0, 1.0, 45.0, 40.0, 0.3, 0.6, 2.0),
                    (0.65, 2.2, 10.0, 3.0, 120.0, 1.0, 18.0, 60.0, 0.4, -0.6, 2.0),
                    (0.40, 1.5, 4.0, 1.0, 0.0, 0.0, 35.0, 30.0, 0.3, 0.0, 4.0),
                    (0.30, 3.0, 14.0, 4.0, 90.0, 2.0, 10.0, 80.0, 0.25, 0.3, 1.0),
                ];
                specs
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        named(
                            i,
                            ArtistProfile {
                                bristle_diameter_mm: s.0,
                                stroke_width_mm: s.1,
                                stroke_length_mm_mean: s.2,
                                stroke_length_mm_sd: s.3,
                                orientation_mean_deg: s.4,
                                orientation_concentration: s.5,
                                strokes_per_cm2: s.6,
                                ridge_amplitude_um: s.7,
                                striation_depth: s.8,
                                height_skew: s.9,
                                micro_noise_um: s.10,
                                ..base.clone()
                            },
                        )
                    })
                    .collect()
            }
            Preset::MatchedMarginals => [(0.0, 0.25), (45.0, 0.35), (90.0, 0.5), (135.0, 0.65)]
                .iter()
                .enumerate()
                .map(|(i, &(orient, bristle))| {
                    named(
                        i,
                        ArtistProfile {
                            orientation_mean_deg: orient,
                            orientation_concentration: 3.0,
                            bristle_diameter_mm: bristle,
                            ..base.clone()
                        },
                    )
                })
                .collect(),
            Preset::StriationOnly => [(0.2, 0.6), (0.3, 0.45), (0.45, 0.3), (0.65, 0.15)]
                .iter()
                .enumerate()
                .map(|(i, &(bristle, depth))| {
                    named(
                        i,
                        ArtistProfile {
                            bristle_diameter_mm: bristle,
                            striation_depth: depth,
                            micro_noise_um: 0.5,
                            ..base.clone()
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn canvas(&self) -> CanvasSpec {
        let palette = match self {
            Preset::PaletteDivergent => Palette::divergent(),
            _ => Palette::shared(),
        };
        // Detrend residue of the bow is shared by every artist and drowns
        // texture differences in the benchmark corpora.
        let bow_um = match self {
            Preset::Separable | Preset::StriationOnly => 0.0,
            _ => CanvasSpec::default().bow_um,
        };
        CanvasSpec {
            palette,
            bow_um,
            ..CanvasSpec::default()
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown preset '{s}'")))
    }
}

pub fn preset_corpus(preset: Preset, paintings_per_artist: usize, seed: u64) -> Result<Corpus> {
    let mut corpus = make_corpus(
        &preset.profiles(),
        &preset.canvas(),
        paintings_per_artist,
        seed,
    )?;
    corpus.preset = Some(preset.name().to_string());
    Ok(corpus)
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Dominant stroke direction (degrees in `[0, 180)`) of each `block`×`block`
/// tile, from the structure tensor of central-difference gradients.
pub fn block_orientations(grid: &Grid, block: usize) -> Vec<f64> {
    let mut out = Vec::new();
    if block < 3 {
        return out;
    }
    for by in (0..grid.height.saturating_sub(block - 1)).step_by(block) {
        for bx in (0..grid.width.saturating_sub(block - 1)).step_by(block) {
            let (mut jxx, mut jyy, mut jxy) = (0.0, 0.0, 0.0);
            for y in by + 1..by + block - 1 {
                for x in bx + 1..bx + block - 1 {
                    let gx = (grid.get(x + 1, y) - grid.get(x - 1, y)) / 2.0;
                    let gy = (grid.get(x, y + 1) - grid.get(x, y - 1)) / 2.0;
                    jxx += gx * gx;
                    jyy += gy * gy;
                    jxy += gx * gy;
                }
            }
            let gradient = 0.5 * (2.0 * jxy).atan2(jxx - jyy);
            // Ridges run perpendicular to the dominant gradient.
            let deg = (gradient.to_degrees() + 90.0).rem_euclid(180.0);
            out.push(deg);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSeparation {
    pub a: String,
    pub b: String,
    pub height_ks: f64,
    pub orientation_ks: f64,
    /// Both statistics fall below the threshold.
    pub indistinguishable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub threshold: f64,
    pub pixels_per_profile: usize,
    pub pairs: Vec<PairSeparation>,
}

/// Detrended (relative) heights of a painting, in microns.
pub fn relative_heights(map: &HeightMap) -> Result<Vec<f64>> {
    Ok(detrend(map, DetrendParams::default())?
        .heights
        .iter()
        .map(|&v| f64::from(v))
        .collect())
}

/// Generate `paintings` paintings per profile and compare every pair by KS
/// statistics on relative heights and block orientations.
pub fn validate_profile_separation(
    profiles: &[ArtistProfile],
    canvas: &CanvasSpec,
    paintings: usize,
    threshold: f64,
    seed: u64,
) -> Result<SeparationReport> {
    let samples = profiles
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut heights = Vec::new();
            let mut orientations = Vec::new();
            for k in 0..paintings.max(1) {
                let pseed = painting_seed(seed, i, k, p.seed_salt);
                let painted = synth_painting(p, i.min(3), canvas, pseed)?;
                let rel = detrend(&painted.height, DetrendParams::default())?;
                orientations.extend(block_orientations(&rel.to_grid(), 32));
                heights.extend(rel.heights.iter().map(|&v| f64::from(v)));
            }
            Ok((heights, orientations))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::new();
    for i in 0..profiles.len() {
        for j in i + 1..profiles.len() {
            let height_ks = ks_statistic(&samples[i].0, &samples[j].0);
            let orientation_ks = ks_statistic(&samples[i].1, &samples[j].1);
            pairs.push(PairSeparation {
                a: profiles[i].name.clone(),
                b: profiles[j].name.clone(),
                height_ks,
                orientation_ks,
                indistinguishable: height_ks < threshold && orientation_ks < threshold,
            });
        }
    }
    Ok(SeparationReport {
        threshold,
        pixels_per_profile: samples.first().map_or(0, |s| s.0.len()),
        pairs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaintingEntry {
    pub painting_id: String,
    pub artist_id: u8,
    pub seed: u64,
    pub height_file: String,
    pub mask_file: String,
    pub color_file: String,
    pub height_sha256: String,
}

/// `corpus.json`: everything needed to reload or regenerate a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub preset: Option<String>,
    pub canvas: CanvasSpec,
    pub profiles: Vec<ArtistProfile>,
    pub paintings: Vec<PaintingEntry>,
}

pub const CORPUS_MANIFEST: &str = "corpus.json";

pub(crate) fn encode_png(
    width: usize,
    height: usize,
    color: image::ColorType,
    raw: &[u8],
) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    let mut buf = Vec::new();
    image::codecs::png::PngEncoder::new(&mut buf).write_image(
        raw,
        width as u32,
        height as u32,
        color,
    )?;
    Ok(buf)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn mask_png(mask: &Grid) -> Result<Vec<u8>> {
    let raw: Vec<u8> = mask
        .data
        .iter()
        .map(|&v| if v > 0.5 { 255 } else { 0 })
        .collect();
    encode_png(mask.width, mask.height, image::ColorType::L8, &raw)
}

pub fn color_png(color: &[Grid; 3]) -> Result<Vec<u8>> {
    let n = color[0].len();
    let mut raw = Vec::with_capacity(3 * n);
    for i in 0..n {
        raw.extend(color.iter().map(|g| to_u8(g.data[i])));
    }
    encode_png(
        color[0].width,
        color[0].height,
        image::ColorType::Rgb8,
        &raw,
    )
}

/// Write every painting (TOPO height map, mask PNG, color PNG) and the manifest.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<CorpusManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for p in &corpus.paintings {
        let height_file = format!("{}.topo", p.painting_id);
        let mask_file = format!("{}.mask.png", p.painting_id);
        let color_file = format!("{}.color.png", p.painting_id);
        let topo = surface::encode_topo(&p.data.height);
        surface::write_atomic(&dir.join(&height_file), &topo)?;
        surface::write_atomic(&dir.join(&mask_file), &mask_png(&p.data.mask)?)?;
        surface::write_atomic(&dir.join(&color_file), &color_png(&p.data.color)?)?;
        entries.push(PaintingEntry {
            painting_id: p.painting_id.clone(),
            artist_id: p.artist_id,
            seed: p.seed,
            height_file,
            mask_file,
            color_file,
            height_sha256: hex_digest(&topo),
        });
    }
    let manifest = CorpusManifest {
        seed: corpus.seed,
        preset: corpus.preset.clone(),
        canvas: corpus.canvas.clone(),
        profiles: corpus.profiles.clone(),
        paintings: entries,
    };
    surface::write_atomic(
        &dir.join(CORPUS_MANIFEST),
        &serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn read_png(path: &Path) -> Result<image::DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(image::load_from_memory_with_format(
        &bytes,
        image::ImageFormat::Png,
    )?)
}

/// Resolve the manifest path: either the file itself or a directory holding it.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CORPUS_MANIFEST)
    } else {
        path.to_path_buf()
    }
}

pub fn read_manifest(path: &Path) -> Result<CorpusManifest> {
    let path = manifest_path(path);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let mpath = manifest_path(path);
    let manifest = read_manifest(&mpath)?;
    let dir = mpath.parent().unwrap_or(Path::new("."));
    let paintings = manifest
        .paintings
        .iter()
        .map(|e| {
            let height = surface::load_heightmap(&dir.join(&e.height_file))?;
            let (w, h) = (height.width_px, height.height_px);
            let mask_img = read_png(&dir.join(&e.mask_file))?.to_luma8();
            let color_img = read_png(&dir.join(&e.color_file))?.to_rgb8();
            if mask_img.dimensions() != (w as u32, h as u32)
                || color_img.dimensions() != (w as u32, h as u32)
            {
                return Err(Error::ShapeMismatch {
                    expected: format!("{w}x{h} mask and color maps for {}", e.painting_id),
                    actual: format!(
                        "{:?} mask, {:?} color",
                        mask_img.dimensions(),
                        color_img.dimensions()
                    ),
                });
            }
            let mask = Grid::new(
                w,
                h,
                mask_img
                    .as_raw()
                    .iter()
                    .map(|&v| if v > 127 { 1.0 } else { 0.0 })
                    .collect(),
            )?;
            let raw = color_img.as_raw();
            let plane = |c: usize| {
                Grid::new(
                    w,
                    h,
                    (0..w * h)
                        .map(|i| f64::from(raw[3 * i + c]) / 255.0)
                        .collect(),
                )
            };
            Ok(Painting {
                painting_id: e.painting_id.clone(),
                artist_id: e.artist_id,
                seed: e.seed,
                data: SynthPainting {
                    height,
                    mask,
                    color: [plane(0)?, plane(1)?, plane(2)?],
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        paintings,
        seed: manifest.seed,
        profiles: manifest.profiles,
        canvas: manifest.canvas,
        preset: manifest.preset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_canvas() -> CanvasSpec {
        CanvasSpec {
            width_px: 300,
            height_px: 375,
            ..CanvasSpec::default()
        }
    }

    fn skewness(v: &[f64]) -> f64 {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let m2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        let m3 = v.iter().map(|x| (x - m).powi(3)).sum::<f64>() / n;
        m3 / m2.powf(1.5)
    }

    #[test]
    fn empty_profile_is_bow_only() {
        let mut p = Preset::Separable.profiles()[0].clone();
        p.strokes_per_cm2 = 0.0;
        p.micro_noise_um = 0.0;
        let canvas = small_canvas();
        let out = synth_painting(&p, 0, &canvas, 3).unwrap();
        let (cx, cy) = (149.5, 187.0);
        for (i, &z) in out.height.heights.iter().enumerate() {
            let (x, y) = ((i % 300) as f64, (i / 300) as f64);
            let u = (x - cx) / cx;
            let v = (y - cy) / cy;
            let bow = canvas.bow_um * (u * u + v * v) / 2.0;
            assert_eq!(z, bow as f32);
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let p = &Preset::Separable.profiles()[1];
        let a = synth_painting(p, 1, &small_canvas(), 9).unwrap();
        let b = synth_painting(p, 1, &small_canvas(), 9).unwrap();
        let c = synth_painting(p, 1, &small_canvas(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.height.heights, c.height.heights);
    }

    #[test]
    fn skew_ordering_survives_generation() {
        let base = Preset::MatchedMarginals.profiles()[0].clone();
        let canvas = CanvasSpec {
            bow_um: 0.0,
            ..small_canvas()
        };
        let skew_of = |s: f64| {
            let p = ArtistProfile {
                height_skew: s,
                ..base.clone()
            };
            let mut all = Vec::new();
            for k in 0..3 {
                let out = synth_painting(&p, 0, &canvas, 100 + k).unwrap();
                all.extend(out.height.heights.iter().map(|&v| f64::from(v)));
            }
            skewness(&all)
        };
        let (lo, hi) = (skew_of(-0.6), skew_of(0.6));
        assert!(lo < 0.0 && hi > 0.0 && lo < hi, "{lo} {hi}");
    }

    #[test]
    fn invalid_inputs_rejected() {
        let mut p = Preset::Separable.profiles()[0].clone();
        p.stroke_width_mm = 0.0;
        assert!(synth_painting(&p, 0, &small_canvas(), 0).is_err());
        let p = Preset::Separable.profiles()[0].clone();
        let tiny = CanvasSpec {
            width_px: 32,
            ..small_canvas()
        };
        assert!(synth_painting(&p, 0, &tiny, 0).is_err());
        let mut long = p.clone();
        long.stroke_length_mm_mean = 50.0;
        assert!(synth_painting(&long, 0, &small_canvas(), 0).is_err());
    }

    #[test]
    fn corpus_shape_and_ids() {
        let profiles = Preset::Separable.profiles();
        let c = make_corpus(&profiles, &small_canvas(), 3, 1).unwrap();
        assert_eq!(c.paintings.len(), 12);
        assert_eq!(c.paintings[0].painting_id, "artist1_p1");
        assert_eq!(c.paintings[11].painting_id, "artist4_p3");
        assert_eq!(c.artists(), vec![1, 2, 3, 4]);
        let one = make_corpus(&profiles, &small_canvas(), 1, 1).unwrap();
        assert_eq!(one.paintings.len(), 4);
        let other = make_corpus(&profiles, &small_canvas(), 1, 2).unwrap();
        assert_ne!(one.paintings[0].data.height, other.paintings[0].data.height);
        assert!(make_corpus(&profiles[..3], &small_canvas(), 1, 1).is_err());
    }

    #[test]
    fn salt_change_is_local() {
        let mut profiles = Preset::Separable.profiles();
        let a = make_corpus(&profiles, &small_canvas(), 2, 4).unwrap();
        profiles[2].seed_salt = 99;
        let b = make_corpus(&profiles, &small_canvas(), 2, 4).unwrap();
        for (pa, pb) in a.paintings.iter().zip(&b.paintings) {
            if pa.artist_id == 3 {
                assert_ne!(pa.data.height, pb.data.height);
            } else {
                assert_eq!(pa, pb);
            }
        }
    }

    #[test]
    fn mask_is_binary_and_mostly_foreground() {
        let m = stencil_mask(Stencil::LilyBlob, 600, 750);
        assert!(m.data.iter().all(|&v| v == 0.0 || v == 1.0));
        let fg = m.data.iter().sum::<f64>() / m.len() as f64;
        assert!((0.5..0.75).contains(&fg), "{fg}");
    }

    #[test]
    fn von_mises_concentrates() {
        let mut rng = rng_for(1, "vm", 0);
        let draws: Vec<f64> = (0..20_000).map(|_| von_mises(&mut rng, 0.5, 4.0)).collect();
        // circular mean and mean resultant length A(κ)=I1/I0 ≈ 0.8635 at κ=4
        let (s, c) = draws
            .iter()
            .fold((0.0, 0.0), |(s, c), t| (s + t.sin(), c + t.cos()));
        let n = draws.len() as f64;
        assert!((s.atan2(c) - 0.5).abs() < 0.02);
        assert!(((s * s + c * c).sqrt() / n - 0.8635).abs() < 0.01);
    }

    #[test]
    fn ks_statistic_known_values() {
        assert_eq!(ks_statistic(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.0);
        assert_eq!(ks_statistic(&[1.0, 2.0], &[3.0, 4.0]), 1.0);
        assert!((ks_statistic(&[1.0, 2.0, 3.0, 4.0], &[3.0, 4.0, 5.0, 6.0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn orientation_estimate_finds_stripes() {
        // stripes varying along x run vertically (90°)
        let g = Grid::from_fn(64, 64, |x, _| (x as f64 * 0.7).sin());
        for a in block_orientations(&g, 32) {
            assert!((a - 90.0).abs() < 1.0, "{a}");
        }
    }

    #[test]
    fn separation_report() {
        let canvas = CanvasSpec {
            bow_um: 0.0,
            ..CanvasSpec::default()
        };
        let base = ArtistProfile {
            stroke_width_mm: 1.0,
            ..Preset::MatchedMarginals.profiles()[0].clone()
        };
        let twin = ArtistProfile {
            seed_salt: 7,
            name: "twin".into(),
            ..base.clone()
        };
        let wide = ArtistProfile {
            stroke_width_mm: 4.0,
            name: "wide".into(),
            ..base.clone()
        };
        let r =
            validate_profile_separation(&[base.clone(), twin, wide], &canvas, 3, 0.05, 5).unwrap();
        assert!(r.pixels_per_profile >= 100_000);
        assert_eq!(r.pairs.len(), 3);
        assert!(r.pairs[0].height_ks <= 0.02, "{:?}", r.pairs[0]);
        assert!(r.pairs[1].height_ks >= 0.1, "{:?}", r.pairs[1]);
        let single = validate_profile_separation(&[base], &canvas, 1, 0.05, 5).unwrap();
        assert!(single.pairs.is_empty());
    }

    #[test]
    fn corpus_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = make_corpus(
            &Preset::PaletteDivergent.profiles(),
            &CanvasSpec {
                palette: Palette::divergent(),
                ..small_canvas()
            },
            1,
            3,
        )
        .unwrap();
        write_corpus(&c, dir.path()).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back.paintings.len(), 4);
        for (a, b) in c.paintings.iter().zip(&back.paintings) {
            assert_eq!(a.data.height.heights, b.data.height.heights);
            assert_eq!(a.data.mask, b.data.mask);
            assert_eq!(a.data.color, b.data.color);
        }
        assert_eq!(back.canvas, c.canvas);
    }

    #[test]
    fn preset_names_parse() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
            assert_eq!(p.profiles().len(), 4);
        }
        assert!("oils".parse::<Preset>().is_err());
    }
}
