//! Patch extraction, resizing, dataset splits and region labelling.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::seed::rng_for;
use crate::surface::NormalizedMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub side_px: usize,
    pub input_side_px: usize,
    pub stride_px: usize,
}

impl PatchSpec {
    pub fn new(side_px: usize, input_side_px: usize) -> Self {
        PatchSpec {
            side_px,
            input_side_px,
            stride_px: side_px,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.side_px < 1 {
            return Err(Error::invalid("patch side_px must be >= 1"));
        }
        if self.input_side_px < 8 {
            return Err(Error::invalid("patch input_side_px must be >= 8"));
        }
        if self.stride_px < 1 {
            return Err(Error::invalid("patch stride_px must be >= 1"));
        }
        Ok(())
    }
}

/// What the values of a patch represent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelKind {
    /// Normalized height in `[0, 1]`.
    Height,
    /// A single intrinsic mode function (unbounded, microns).
    Imf(usize),
    /// RGB pseudo-color in `[0, 1]`, three channels.
    PseudoColor,
}

impl ChannelKind {
    pub fn channels(&self) -> usize {
        match self {
            ChannelKind::PseudoColor => 3,
            _ => 1,
        }
    }
}

impl std::fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ChannelKind::Height => write!(f, "height"),
            ChannelKind::Imf(k) => write!(f, "imf:{k}"),
            ChannelKind::PseudoColor => write!(f, "pseudo-color"),
        }
    }
}

impl std::str::FromStr for ChannelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "height" => Ok(ChannelKind::Height),
            "pseudo-color" | "pseudocolor" | "color" => Ok(ChannelKind::PseudoColor),
            _ => {
                let k = s
                    .strip_prefix("imf:")
                    .and_then(|k| k.parse::<usize>().ok())
                    .filter(|&k| k >= 1)
                    .ok_or_else(|| Error::invalid(format!("unknown channel '{s}'")))?;
                Ok(ChannelKind::Imf(k))
            }
        }
    }
}

/// Identity of a patch within a corpus.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PatchKey {
    pub painting_id: String,
    pub grid_row: usize,
    pub grid_col: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// Channel-major `channels × input_side × input_side` values.
    pub values: Vec<f32>,
    pub channels: usize,
    pub side: usize,
    pub kind: ChannelKind,
    pub painting_id: String,
    pub artist_id: u8,
    pub grid_row: usize,
    pub grid_col: usize,
    /// Top-left corner of the footprint in source pixels.
    pub origin_px: (usize, usize),
    pub source_side_px: usize,
    pub source_dims: (usize, usize),
    pub physical_side_mm: f64,
}

impl Patch {
    pub fn key(&self) -> PatchKey {
        PatchKey {
            painting_id: self.painting_id.clone(),
            grid_row: self.grid_row,
            grid_col: self.grid_col,
        }
    }
}

/// Placement of one patch footprint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
    pub x0: usize,
    pub y0: usize,
}

/// Top-left anchored grid of footprints; partial footprints are discarded.
pub fn patch_cells(width: usize, height: usize, spec: &PatchSpec) -> Result<Vec<Cell>> {
    spec.validate()?;
    if width < spec.side_px || height < spec.side_px {
        return Err(Error::invalid(format!(
            "map {width}x{height} is smaller than one {0}x{0} patch",
            spec.side_px
        )));
    }
    let cols = (width - spec.side_px) / spec.stride_px + 1;
    let rows = (height - spec.side_px) / spec.stride_px + 1;
    let mut cells = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            cells.push(Cell {
                row,
                col,
                x0: col * spec.stride_px,
                y0: row * spec.stride_px,
            });
        }
    }
    Ok(cells)
}

/// Origin shared by all patches cut from one painting.
#[derive(Debug, Clone)]
pub struct PatchSource<'a> {
    pub painting_id: &'a str,
    pub artist_id: u8,
    pub pitch_um: f64,
    pub kind: ChannelKind,
    /// One grid per channel, all with the same shape.
    pub channels: Vec<&'a Grid>,
}

pub fn patchify_source(src: &PatchSource<'_>, spec: &PatchSpec) -> Result<Vec<Patch>> {
    let first = src
        .channels
        .first()
        .ok_or_else(|| Error::invalid("patch source has no channels"))?;
    if src.channels.iter().any(|g| !g.same_shape(first)) {
        return Err(Error::invalid("channel grids differ in shape"));
    }
    if !(1..=4).contains(&src.artist_id) {
        return Err(Error::LabelOutOfRange(src.artist_id));
    }
    let cells = patch_cells(first.width, first.height, spec)?;
    let side = spec.input_side_px;
    Ok(cells
        .iter()
        .map(|cell| {
            let mut values = Vec::with_capacity(src.channels.len() * side * side);
            for g in &src.channels {
                let raw = g.window(cell.x0, cell.y0, spec.side_px);
                values.extend(
                    resize_patch(&raw, spec.side_px, side)
                        .into_iter()
                        .map(|v| v as f32),
                );
            }
            Patch {
                values,
                channels: src.channels.len(),
                side,
                kind: src.kind,
                painting_id: src.painting_id.to_string(),
                artist_id: src.artist_id,
                grid_row: cell.row,
                grid_col: cell.col,
                origin_px: (cell.x0, cell.y0),
                source_side_px: spec.side_px,
                source_dims: (first.width, first.height),
                physical_side_mm: spec.side_px as f64 * src.pitch_um / 1000.0,
            }
        })
        .collect())
}

/// Cut a normalized height map into classifier-ready patches.
pub fn patchify(
    map: &NormalizedMap,
    artist_id: u8,
    pitch_um: f64,
    spec: &PatchSpec,
) -> Result<Vec<Patch>> {
    patchify_source(
        &PatchSource {
            painting_id: &map.source_ref,
            artist_id,
            pitch_um,
            kind: ChannelKind::Height,
            channels: vec![&map.grid],
        },
        spec,
    )
}

/// Bilinear resize of a square patch with corner-aligned sampling.
pub fn resize_patch(src: &[f64], src_side: usize, target: usize) -> Vec<f64> {
    assert_eq!(src.len(), src_side * src_side, "source is not square");
    if src_side == target {
        return src.to_vec();
    }
    let coords: Vec<(usize, usize, f64)> = (0..target)
        .map(|i| {
            if target == 1 || src_side == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (src_side - 1) as f64 / (target - 1) as f64;
            let i0 = (pos.floor() as usize).min(src_side - 2);
            (i0, i0 + 1, pos - i0 as f64)
        })
        .collect();
    let mut out = Vec::with_capacity(target * target);
    for &(y0, y1, fy) in &coords {
        for &(x0, x1, fx) in &coords {
            let a = src[y0 * src_side + x0];
            let b = src[y0 * src_side + x1];
            let c = src[y1 * src_side + x0];
            let d = src[y1 * src_side + x1];
            let top = a + (b - a) * fx;
            let bottom = c + (d - c) * fx;
            out.push(top + (bottom - top) * fy);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<Patch>,
    pub validation: Vec<Patch>,
    pub test: Vec<Patch>,
    pub test_painting_per_artist: BTreeMap<u8, String>,
    pub seed: u64,
}

/// Reproducible record of split membership.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDescriptor {
    pub seed: u64,
    pub test_painting_per_artist: BTreeMap<u8, String>,
    pub train: Vec<PatchKey>,
    pub validation: Vec<PatchKey>,
    pub test: Vec<PatchKey>,
}

impl DatasetSplit {
    pub fn descriptor(&self) -> SplitDescriptor {
        let keys = |ps: &[Patch]| ps.iter().map(Patch::key).collect();
        SplitDescriptor {
            seed: self.seed,
            test_painting_per_artist: self.test_painting_per_artist.clone(),
            train: keys(&self.train),
            validation: keys(&self.validation),
            test: keys(&self.test),
        }
    }
}

/// Partition patches: one held-out painting per artist forms the test set, the
/// remaining paintings' patches are shuffled per artist and split
/// `1 - validation_fraction : validation_fraction` (9:1 by default).
pub fn split_dataset(
    patches: Vec<Patch>,
    test_painting_per_artist: &BTreeMap<u8, String>,
    validation_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(0.0..1.0).contains(&validation_fraction) {
        return Err(Error::invalid("validation fraction must lie in [0, 1)"));
    }
    let mut paintings: BTreeMap<u8, BTreeSet<String>> = BTreeMap::new();
    for p in &patches {
        paintings
            .entry(p.artist_id)
            .or_default()
            .insert(p.painting_id.clone());
    }
    for (artist, ids) in &paintings {
        if ids.len() < 3 {
            return Err(Error::invalid(format!(
                "artist {artist} has {} paintings; at least 3 are required",
                ids.len()
            )));
        }
        let test = test_painting_per_artist.get(artist).ok_or_else(|| {
            Error::invalid(format!("no test painting chosen for artist {artist}"))
        })?;
        if !ids.contains(test) {
            return Err(Error::invalid(format!(
                "test painting {test} does not belong to artist {artist}"
            )));
        }
    }

    let mut sorted = patches;
    sorted.sort_by(|a, b| {
        (a.artist_id, &a.painting_id, a.grid_row, a.grid_col).cmp(&(
            b.artist_id,
            &b.painting_id,
            b.grid_row,
            b.grid_col,
        ))
    });
    let mut pool: BTreeMap<u8, Vec<Patch>> = BTreeMap::new();
    let mut test = Vec::new();
    for p in sorted {
        if test_painting_per_artist.get(&p.artist_id) == Some(&p.painting_id) {
            test.push(p);
        } else {
            pool.entry(p.artist_id).or_default().push(p);
        }
    }

    let mut train = Vec::new();
    let mut validation = Vec::new();
    for (artist, mut ps) in pool {
        let mut rng = rng_for(seed, "split", u64::from(artist));
        ps.shuffle(&mut rng);
        let n_val = (ps.len() as f64 * validation_fraction).round() as usize;
        let rest = ps.split_off(n_val);
        validation.extend(ps);
        train.extend(rest);
    }
    Ok(DatasetSplit {
        train,
        validation,
        test,
        test_painting_per_artist: test_painting_per_artist.clone(),
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionClass {
    Background,
    Foreground,
    Border,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionThresholds {
    pub background_max: f64,
    pub foreground_min: f64,
}

impl Default for RegionThresholds {
    fn default() -> Self {
        RegionThresholds {
            background_max: 0.05,
            foreground_min: 0.95,
        }
    }
}

impl RegionThresholds {
    pub fn classify(&self, foreground_fraction: f64) -> RegionClass {
        if foreground_fraction <= self.background_max {
            RegionClass::Background
        } else if foreground_fraction >= self.foreground_min {
            RegionClass::Foreground
        } else {
            RegionClass::Border
        }
    }
}

/// Label a patch by the fraction of its source footprint covered by the
/// foreground mask (non-zero samples).
pub fn classify_region(
    patch: &Patch,
    mask: &Grid,
    thresholds: &RegionThresholds,
) -> Result<RegionClass> {
    if (mask.width, mask.height) != patch.source_dims {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", patch.source_dims.0, patch.source_dims.1),
            actual: format!("{}x{}", mask.width, mask.height),
        });
    }
    let (x0, y0) = patch.origin_px;
    let side = patch.source_side_px;
    let fg = mask
        .window(x0, y0, side)
        .iter()
        .filter(|&&v| v > 0.5)
        .count();
    Ok(thresholds.classify(fg as f64 / (side * side) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn nmap(w: usize, h: usize, id: &str) -> NormalizedMap {
        NormalizedMap {
            grid: Grid::from_fn(w, h, |x, y| ((x + y) % 7) as f64 / 7.0),
            source_ref: id.to_string(),
        }
    }

    #[test]
    fn patch_counts_follow_floor_arithmetic() {
        let spec = PatchSpec::new(200, 64);
        assert_eq!(patch_cells(2400, 3000, &spec).unwrap().len(), 180);
        assert_eq!(
            patch_cells(10, 10, &PatchSpec::new(10, 8)).unwrap().len(),
            1
        );
        assert_eq!(
            patch_cells(25, 25, &PatchSpec::new(10, 8)).unwrap().len(),
            4
        );
        assert!(patch_cells(9, 30, &PatchSpec::new(10, 8)).is_err());
    }

    #[test]
    fn patchify_records_origin() {
        let ps = patchify(&nmap(25, 25, "a1_p1"), 1, 50.0, &PatchSpec::new(10, 8)).unwrap();
        assert_eq!(ps.len(), 4);
        assert_eq!(ps[3].origin_px, (10, 10));
        assert_eq!((ps[3].grid_row, ps[3].grid_col), (1, 1));
        assert!((ps[0].physical_side_mm - 0.5).abs() < 1e-12);
        assert_eq!(ps[0].values.len(), 64);
    }

    #[test]
    fn resize_constant_and_corners() {
        let c = resize_patch(&[0.3; 9], 3, 7);
        assert!(c.iter().all(|&v| (v - 0.3).abs() < 1e-15));

        let checker = [0.0, 1.0, 1.0, 0.0];
        let up = resize_patch(&checker, 2, 4);
        assert_eq!(up[0], 0.0);
        assert_eq!(up[3], 1.0);
        assert_eq!(up[12], 1.0);
        assert_eq!(up[15], 0.0);
        assert!(up.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn downsizing_preserves_linear_ramp() {
        let n = 224;
        let src: Vec<f64> = (0..n * n)
            .map(|i| (i % n) as f64 / (n - 1) as f64)
            .collect();
        let out = resize_patch(&src, n, 64);
        for y in 0..64 {
            for x in 0..64 {
                let expected = x as f64 / 63.0;
                assert!((out[y * 64 + x] - expected).abs() < 1e-6);
            }
        }
    }

    fn corpus_patches(side: usize) -> (Vec<Patch>, BTreeMap<u8, String>) {
        let mut all = Vec::new();
        let mut test = BTreeMap::new();
        for artist in 1..=4u8 {
            for k in 1..=3 {
                let id = format!("artist{artist}_p{k}");
                let m = nmap(2400, 3000, &id);
                all.extend(patchify(&m, artist, 50.0, &PatchSpec::new(side, 8)).unwrap());
            }
            test.insert(artist, format!("artist{artist}_p3"));
        }
        (all, test)
    }

    #[test]
    fn split_counts_match_nine_to_one() {
        let (all, test) = corpus_patches(200);
        assert_eq!(all.len(), 4 * 540);
        let split = split_dataset(all, &test, 0.1, 42).unwrap();
        for artist in 1..=4u8 {
            let tr = split.train.iter().filter(|p| p.artist_id == artist).count();
            let va = split
                .validation
                .iter()
                .filter(|p| p.artist_id == artist)
                .count();
            let te = split.test.iter().filter(|p| p.artist_id == artist).count();
            assert_eq!((tr, va, te), (324, 36, 180));
        }
        let mut seen = BTreeSet::new();
        for p in split
            .train
            .iter()
            .chain(&split.validation)
            .chain(&split.test)
        {
            assert!(seen.insert(p.key()), "duplicate {:?}", p.key());
        }
        assert!(split.train.iter().all(|p| !p.painting_id.ends_with("_p3")));
    }

    #[test]
    fn split_is_deterministic_and_test_choice_matters() {
        let (all, test) = corpus_patches(400);
        let a = split_dataset(all.clone(), &test, 0.1, 9)
            .unwrap()
            .descriptor();
        let b = split_dataset(all.clone(), &test, 0.1, 9)
            .unwrap()
            .descriptor();
        assert_eq!(a, b);
        let other: BTreeMap<u8, String> = (1..=4u8).map(|a| (a, format!("artist{a}_p1"))).collect();
        let c = split_dataset(all, &other, 0.1, 9).unwrap().descriptor();
        let ta: BTreeSet<_> = a.test.iter().collect();
        assert!(c.test.iter().all(|k| !ta.contains(k)));
    }

    #[test]
    fn split_rejects_too_few_paintings() {
        let mut all = Vec::new();
        for k in 1..=2 {
            all.extend(
                patchify(
                    &nmap(40, 40, &format!("artist1_p{k}")),
                    1,
                    50.0,
                    &PatchSpec::new(20, 8),
                )
                .unwrap(),
            );
        }
        let test: BTreeMap<u8, String> = [(1u8, "artist1_p1".to_string())].into();
        assert!(split_dataset(all, &test, 0.1, 0).is_err());
    }

    #[test]
    fn region_classes() {
        let t = RegionThresholds::default();
        assert_eq!(t.classify(0.0), RegionClass::Background);
        assert_eq!(t.classify(1.0), RegionClass::Foreground);
        assert_eq!(t.classify(0.5), RegionClass::Border);

        let map = nmap(20, 10, "x");
        let ps = patchify(&map, 1, 50.0, &PatchSpec::new(10, 8)).unwrap();
        let mask = Grid::from_fn(20, 10, |x, _| if x >= 10 { 1.0 } else { 0.0 });
        assert_eq!(
            classify_region(&ps[0], &mask, &t).unwrap(),
            RegionClass::Background
        );
        assert_eq!(
            classify_region(&ps[1], &mask, &t).unwrap(),
            RegionClass::Foreground
        );
        assert!(classify_region(&ps[0], &Grid::filled(5, 5, 0.0), &t).is_err());
    }

    #[test]
    fn channel_kind_parses() {
        assert_eq!("imf:3".parse::<ChannelKind>().unwrap(), ChannelKind::Imf(3));
        assert_eq!(
            "height".parse::<ChannelKind>().unwrap(),
            ChannelKind::Height
        );
        assert!("imf:0".parse::<ChannelKind>().is_err());
        assert!("depth".parse::<ChannelKind>().is_err());
    }

    proptest! {
        #[test]
        fn region_is_monotone(f1 in 0.0f64..=1.0, f2 in 0.0f64..=1.0) {
            let t = RegionThresholds::default();
            let rank = |c: RegionClass| match c {
                RegionClass::Background => 0,
                RegionClass::Border => 1,
                RegionClass::Foreground => 2,
            };
            let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
            prop_assert!(rank(t.classify(lo)) <= rank(t.classify(hi)));
        }

        #[test]
        fn cells_tile_without_overlap(w in 10usize..120, h in 10usize..120, side in 1usize..10) {
            let cells = patch_cells(w, h, &PatchSpec { side_px: side, input_side_px: 8, stride_px: side }).unwrap();
            prop_assert_eq!(cells.len(), (w / side) * (h / side));
            let mut cover = vec![0u8; w * h];
            for c in &cells {
                for y in c.y0..c.y0 + side {
                    for x in c.x0..c.x0 + side {
                        cover[y * w + x] += 1;
                    }
                }
            }
            prop_assert!(cover.iter().all(|&c| c <= 1));
            let covered = cover.iter().filter(|&&c| c == 1).count();
            prop_assert_eq!(covered, cells.len() * side * side);
        }

        #[test]
        fn resize_stays_within_source_range(vals in proptest::collection::vec(-3.0f64..3.0, 25), target in 2usize..20) {
            let out = resize_patch(&vals, 5, target);
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }

        #[test]
        fn train_fraction_within_rounding(n in 1usize..400) {
            let n_val = (n as f64 * 0.1).round() as usize;
            let tr = n - n_val;
            prop_assert!(((tr as f64) / (n as f64) - 0.9).abs() <= 1.0 / n as f64);
        }
    }
}
