//! Height-map containers and preprocessing.
//!
//! Raw scans are stored as [`HeightMap`]s in microns. [`detrend`] removes the
//! large-scale canvas shape by subtracting an exact disk mean filter, and
//! [`normalize`] maps relative heights onto the unit interval.
//!
//! Two on-disk formats are supported:
//!
//! * TOPO (lossless, little-endian): `"TOPO"`, `u32` version (1), `u32` width,
//!   `u32` height, `f64` pitch in microns, `width*height` `f32` heights in
//!   row-major order, `u32` metadata byte length, then UTF-8 `key=value` lines.
//! * PNG16 (interop): single-channel 16-bit grayscale plus a sidecar
//!   `<name>.topo.json` holding `pitch_um`, `z_lo_um` and `z_hi_um`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

pub const TOPO_MAGIC: &[u8; 4] = b"TOPO";
pub const TOPO_VERSION: u32 = 1;
pub const DEFAULT_PITCH_UM: f64 = 50.0;

#[derive(Debug, Clone, PartialEq)]
pub struct HeightMap {
    pub width_px: usize,
    pub height_px: usize,
    pub pitch_um: f64,
    /// Row-major heights in microns.
    pub heights: Vec<f32>,
    pub meta: BTreeMap<String, String>,
}

impl HeightMap {
    pub fn new(
        width_px: usize,
        height_px: usize,
        pitch_um: f64,
        heights: Vec<f32>,
    ) -> Result<Self> {
        let map = HeightMap {
            width_px,
            height_px,
            pitch_um,
            heights,
            meta: BTreeMap::new(),
        };
        map.validate()?;
        Ok(map)
    }

    pub fn from_grid(grid: &Grid, pitch_um: f64) -> Result<Self> {
        HeightMap::new(
            grid.width,
            grid.height,
            pitch_um,
            grid.data.iter().map(|&v| v as f32).collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_px * self.height_px != self.heights.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.width_px, self.height_px),
                actual: format!("{} samples", self.heights.len()),
            });
        }
        if !(self.pitch_um > 0.0 && self.pitch_um.is_finite()) {
            return Err(Error::invalid(format!(
                "pitch_um must be > 0, got {}",
                self.pitch_um
            )));
        }
        if let Some(i) = self.heights.iter().position(|h| !h.is_finite()) {
            return Err(Error::invalid(format!("non-finite height at sample {i}")));
        }
        Ok(())
    }

    pub fn to_grid(&self) -> Grid {
        Grid {
            width: self.width_px,
            height: self.height_px,
            data: self.heights.iter().map(|&h| f64::from(h)).collect(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetrendParams {
    pub radius_px: usize,
}

impl Default for DetrendParams {
    fn default() -> Self {
        DetrendParams { radius_px: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizeParams {
    pub lo_um: f64,
    pub hi_um: f64,
}

impl Default for NormalizeParams {
    fn default() -> Self {
        NormalizeParams {
            lo_um: -200.0,
            hi_um: 300.0,
        }
    }
}

impl NormalizeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.hi_um > self.lo_um) {
            return Err(Error::invalid(format!(
                "normalize range requires hi > lo, got [{}, {}]",
                self.lo_um, self.hi_um
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, z: f64) -> f64 {
        ((z - self.lo_um) / (self.hi_um - self.lo_um)).clamp(0.0, 1.0)
    }
}

/// Unit-interval map derived from relative heights.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedMap {
    pub grid: Grid,
    pub source_ref: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MapFormat {
    Topo,
    /// 16-bit PNG quantized over `[z_lo_um, z_hi_um]`.
    Png16 {
        z_lo_um: f64,
        z_hi_um: f64,
    },
}

impl MapFormat {
    pub fn png16_default() -> Self {
        let p = NormalizeParams::default();
        MapFormat::Png16 {
            z_lo_um: p.lo_um,
            z_hi_um: p.hi_um,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PngSidecar {
    pitch_um: f64,
    z_lo_um: f64,
    z_hi_um: f64,
}

pub fn sidecar_path(png: &Path) -> PathBuf {
    let stem = png
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    png.with_file_name(format!("{stem}.topo.json"))
}

/// Load a TOPO container or a PNG16 image with its sidecar.
pub fn load_heightmap(path: &Path) -> Result<HeightMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(TOPO_MAGIC) {
        decode_topo(&bytes, path)
    } else if bytes.starts_with(b"\x89PNG") {
        load_png16(path)
    } else {
        Err(Error::malformed(
            path,
            "unrecognized magic (expected TOPO or PNG)",
        ))
    }
}

pub fn save_heightmap(map: &HeightMap, path: &Path, format: MapFormat) -> Result<()> {
    map.validate()?;
    match format {
        MapFormat::Topo => {
            let bytes = encode_topo(map);
            write_atomic(path, &bytes)
        }
        MapFormat::Png16 { z_lo_um, z_hi_um } => save_png16(map, path, z_lo_um, z_hi_um),
    }
}

pub fn encode_topo(map: &HeightMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(28 + 4 * map.heights.len());
    out.extend_from_slice(TOPO_MAGIC);
    out.extend_from_slice(&TOPO_VERSION.to_le_bytes());
    out.extend_from_slice(&(map.width_px as u32).to_le_bytes());
    out.extend_from_slice(&(map.height_px as u32).to_le_bytes());
    out.extend_from_slice(&map.pitch_um.to_le_bytes());
    for h in &map.heights {
        out.extend_from_slice(&h.to_le_bytes());
    }
    let meta: String = map.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out
}

pub fn decode_topo(bytes: &[u8], path: &Path) -> Result<HeightMap> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        path,
    };
    if cur.take(4)? != TOPO_MAGIC {
        return Err(Error::malformed(path, "bad magic"));
    }
    let version = cur.u32()?;
    if version != TOPO_VERSION {
        return Err(Error::malformed(
            path,
            format!("unsupported version {version}"),
        ));
    }
    let width = cur.u32()? as usize;
    let height = cur.u32()? as usize;
    let pitch = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::malformed(path, "dimension overflow"))?;
    let payload = cur.take(n * 4).map_err(|_| {
        Error::malformed(
            path,
            format!("dimension mismatch: header declares {width}x{height} but payload is short"),
        )
    })?;
    let heights: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let meta_len = cur.u32()? as usize;
    let meta_bytes = cur.take(meta_len)?;
    if cur.pos != bytes.len() {
        return Err(Error::malformed(
            path,
            format!(
                "dimension mismatch: {} trailing bytes",
                bytes.len() - cur.pos
            ),
        ));
    }
    let meta_text = std::str::from_utf8(meta_bytes)
        .map_err(|_| Error::malformed(path, "metadata not UTF-8"))?;
    let mut meta = BTreeMap::new();
    for line in meta_text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::malformed(path, format!("metadata line without '=': {line}")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    let map = HeightMap {
        width_px: width,
        height_px: height,
        pitch_um: pitch,
        heights,
        meta,
    };
    map.validate()
        .map_err(|e| Error::malformed(path, e.to_string()))?;
    Ok(map)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::malformed(self.path, "truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn load_png16(path: &Path) -> Result<HeightMap> {
    let side = sidecar_path(path);
    if !side.exists() {
        return Err(Error::MissingSidecar(side));
    }
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sc: PngSidecar = serde_json::from_str(&text)?;
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    let scale = (sc.z_hi_um - sc.z_lo_um) / 65535.0;
    let heights = img
        .into_raw()
        .into_iter()
        .map(|level| (sc.z_lo_um + f64::from(level) * scale) as f32)
        .collect();
    HeightMap::new(w as usize, h as usize, sc.pitch_um, heights)
        .map(|m| m.with_meta("source_format", "png16"))
}

fn save_png16(map: &HeightMap, path: &Path, z_lo_um: f64, z_hi_um: f64) -> Result<()> {
    if !(z_hi_um > z_lo_um) {
        return Err(Error::invalid("PNG16 range requires z_hi > z_lo"));
    }
    let span = z_hi_um - z_lo_um;
    let levels: Vec<u16> = map
        .heights
        .iter()
        .map(|&z| {
            let t = ((f64::from(z) - z_lo_um) / span).clamp(0.0, 1.0);
            (t * 65535.0).round() as u16
        })
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(map.width_px as u32, map.height_px as u32, levels)
            .ok_or_else(|| Error::invalid("PNG buffer size mismatch"))?;
    img.save(path)?;
    let sc = PngSidecar {
        pitch_um: map.pitch_um,
        z_lo_um,
        z_hi_um,
    };
    write_atomic(
        &sidecar_path(path),
        serde_json::to_string_pretty(&sc)?.as_bytes(),
    )
}

/// Write via a temporary sibling and rename, so readers never see partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Exact mean over the Euclidean disk of `radius` pixels around every sample,
/// restricted to in-grid pixels and renormalized by their count.
pub fn disk_mean(grid: &Grid, radius: usize) -> Grid {
    let (w, h) = (grid.width, grid.height);
    let r = radius as isize;
    // prefix[y][x] = sum of row y over [0, x)
    let mut prefix = vec![0.0f64; h * (w + 1)];
    for y in 0..h {
        let row = grid.row(y);
        let p = &mut prefix[y * (w + 1)..(y + 1) * (w + 1)];
        let mut acc = 0.0;
        for x in 0..w {
            acc += row[x];
            p[x + 1] = acc;
        }
    }
    let half_widths: Vec<isize> = (0..=r)
        .map(|dy| {
            let mut hw = ((r * r - dy * dy) as f64).sqrt().floor() as isize;
            // guard against sqrt rounding on perfect squares
            while (hw + 1) * (hw + 1) + dy * dy <= r * r {
                hw += 1;
            }
            while hw * hw + dy * dy > r * r {
                hw -= 1;
            }
            hw
        })
        .collect();
    let mut out = vec![0.0f64; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, out_row)| {
        let y = y as isize;
        for (x, o) in out_row.iter_mut().enumerate() {
            let x = x as isize;
            let mut sum = 0.0;
            let mut count = 0usize;
            for dy in -r..=r {
                let yy = y + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                let hw = half_widths[dy.unsigned_abs()];
                let x0 = (x - hw).max(0) as usize;
                let x1 = (x + hw).min(w as isize - 1) as usize;
                let p = &prefix[yy as usize * (w + 1)..];
                sum += p[x1 + 1] - p[x0];
                count += x1 + 1 - x0;
            }
            *o = sum / count as f64;
        }
    });
    Grid {
        width: w,
        height: h,
        data: out,
    }
}

/// Relative heights: raw minus its disk-mean-filtered profile.
pub fn detrend(map: &HeightMap, params: DetrendParams) -> Result<HeightMap> {
    map.validate()?;
    if params.radius_px < 1 {
        return Err(Error::invalid("detrend radius must be >= 1"));
    }
    let raw = map.to_grid();
    let trend = disk_mean(&raw, params.radius_px);
    let heights = raw
        .data
        .iter()
        .zip(&trend.data)
        .map(|(z, t)| (z - t) as f32)
        .collect();
    let mut meta = map.meta.clone();
    meta.insert("detrend_radius_px".into(), params.radius_px.to_string());
    Ok(HeightMap {
        width_px: map.width_px,
        height_px: map.height_px,
        pitch_um: map.pitch_um,
        heights,
        meta,
    })
}

pub fn normalize(map: &HeightMap, params: NormalizeParams) -> Result<NormalizedMap> {
    params.validate()?;
    let data = map
        .heights
        .iter()
        .map(|&z| params.apply(f64::from(z)))
        .collect();
    Ok(NormalizedMap {
        grid: Grid {
            width: map.width_px,
            height: map.height_px,
            data,
        },
        source_ref: map.meta.get("painting_id").cloned().unwrap_or_default(),
    })
}
