//! Bidimensional empirical mode decomposition.
//!
//! Sifting repeatedly subtracts the mean of an upper and a lower envelope
//! until the Cauchy-type SD criterion is met. Envelopes are morphological:
//! grey dilation (upper) and erosion (lower) with a disk sized from the median
//! nearest-extremum spacing, then Gaussian smoothing. Every extracted IMF is
//! subtracted from the working signal, so `source = Σ imfs + residual` holds
//! by construction regardless of envelope quality.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiftParams {
    pub max_imfs: usize,
    pub sd_threshold: f64,
    pub max_sift_iters: usize,
    /// Gaussian σ applied to the envelopes; `None` uses half the extremum spacing.
    pub envelope_smooth_sigma_px: Option<f64>,
}

impl Default for SiftParams {
    fn default() -> Self {
        SiftParams {
            max_imfs: 5,
            sd_threshold: 0.2,
            max_sift_iters: 50,
            envelope_smooth_sigma_px: None,
        }
    }
}

impl SiftParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_imfs < 1 {
            return Err(Error::invalid("max_imfs must be >= 1"));
        }
        if !(self.sd_threshold > 0.0) {
            return Err(Error::invalid("sd_threshold must be > 0"));
        }
        if matches!(self.envelope_smooth_sigma_px, Some(s) if !(s >= 0.0)) {
            return Err(Error::invalid("envelope sigma must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Extrema {
    pub maxima: Vec<(usize, usize)>,
    pub minima: Vec<(usize, usize)>,
}

/// Strict 8-neighbour extrema; border pixels compare only against in-grid
/// neighbours and plateaus produce nothing.
pub fn find_extrema(grid: &Grid) -> Extrema {
    let (w, h) = (grid.width as isize, grid.height as isize);
    let mut ext = Extrema::default();
    for y in 0..h {
        for x in 0..w {
            let v = grid.get(x as usize, y as usize);
            let (mut is_max, mut is_min, mut any) = (true, true, false);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (xx, yy) = (x + dx, y + dy);
                    if xx < 0 || yy < 0 || xx >= w || yy >= h {
                        continue;
                    }
                    any = true;
                    let n = grid.get(xx as usize, yy as usize);
                    is_max &= v > n;
                    is_min &= v < n;
                }
            }
            if !any {
                continue;
            }
            if is_max {
                ext.maxima.push((x as usize, y as usize));
            } else if is_min {
                ext.minima.push((x as usize, y as usize));
            }
        }
    }
    ext
}

/// Median distance from each extremum to its nearest extremum of the same kind.
pub fn median_extremum_spacing(ext: &Extrema, width: usize, height: usize) -> Option<f64> {
    let mut d = nearest_distances(&ext.maxima, width, height);
    d.extend(nearest_distances(&ext.minima, width, height));
    if d.is_empty() {
        return None;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len() / 2;
    Some(if d.len() % 2 == 1 {
        d[m]
    } else {
        0.5 * (d[m - 1] + d[m])
    })
}

fn nearest_distances(points: &[(usize, usize)], width: usize, height: usize) -> Vec<f64> {
    if points.len() < 2 {
        return Vec::new();
    }
    let cell = ((width * height) as f64 / points.len() as f64)
        .sqrt()
        .max(1.0);
    let cw = (width as f64 / cell).ceil() as usize + 1;
    let ch = (height as f64 / cell).ceil() as usize + 1;
    let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); cw * ch];
    let cell_of = |p: (usize, usize)| ((p.0 as f64 / cell) as usize, (p.1 as f64 / cell) as usize);
    for (i, &p) in points.iter().enumerate() {
        let (cx, cy) = cell_of(p);
        buckets[cy * cw + cx].push(i as u32);
    }
    points
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let (cx, cy) = cell_of(p);
            let mut best = f64::INFINITY;
            let mut ring = 0usize;
            loop {
                let x_lo = cx.saturating_sub(ring);
                let y_lo = cy.saturating_sub(ring);
                let x_hi = (cx + ring).min(cw - 1);
                let y_hi = (cy + ring).min(ch - 1);
                for by in y_lo..=y_hi {
                    for bx in x_lo..=x_hi {
                        let on_ring = bx + ring == cx
                            || bx == cx + ring
                            || by + ring == cy
                            || by == cy + ring;
                        if !on_ring {
                            continue;
                        }
                        for &j in &buckets[by * cw + bx] {
                            if j as usize == i {
                                continue;
                            }
                            let q = points[j as usize];
                            let dx = q.0 as f64 - p.0 as f64;
                            let dy = q.1 as f64 - p.1 as f64;
                            best = best.min((dx * dx + dy * dy).sqrt());
                        }
                    }
                }
                // every unvisited point lies at least `ring * cell` away
                if best <= ring as f64 * cell
                    || (x_lo == 0 && y_lo == 0 && x_hi == cw - 1 && y_hi == ch - 1)
                {
                    break;
                }
                ring += 1;
            }
            best
        })
        .collect()
}

fn disk_half_widths(r: usize) -> Vec<usize> {
    (0..=r)
        .map(|dy| {
            let mut hw = 0usize;
            while (hw + 1) * (hw + 1) + dy * dy <= r * r {
                hw += 1;
            }
            hw
        })
        .collect()
}

/// Running maximum over `[i - w, i + w]` (clipped) in O(n) using
/// prefix/suffix block maxima.
fn sliding_max(
    src: &[f64],
    w: usize,
    ext: &mut Vec<f64>,
    g: &mut Vec<f64>,
    hbuf: &mut Vec<f64>,
    out: &mut [f64],
) {
    let n = src.len();
    if w == 0 {
        out.copy_from_slice(src);
        return;
    }
    let k = 2 * w + 1;
    let len = n + 2 * w;
    ext.clear();
    ext.resize(len, f64::NEG_INFINITY);
    ext[w..w + n].copy_from_slice(src);
    g.clear();
    g.resize(len, f64::NEG_INFINITY);
    hbuf.clear();
    hbuf.resize(len, f64::NEG_INFINITY);
    for j in 0..len {
        g[j] = if j % k == 0 {
            ext[j]
        } else {
            g[j - 1].max(ext[j])
        };
    }
    for j in (0..len).rev() {
        hbuf[j] = if j == len - 1 || (j + 1) % k == 0 {
            ext[j]
        } else {
            hbuf[j + 1].max(ext[j])
        };
    }
    for i in 0..n {
        out[i] = hbuf[i].max(g[i + k - 1]);
    }
}

/// Grey dilation with a Euclidean disk of radius `r` (out-of-grid pixels ignored).
pub fn dilate_disk(grid: &Grid, r: usize) -> Grid {
    let (w, h) = (grid.width, grid.height);
    let hws = disk_half_widths(r);
    let mut out = vec![f64::NEG_INFINITY; w * h];
    let (mut ext, mut g, mut hb) = (Vec::new(), Vec::new(), Vec::new());
    let mut tmp = vec![0.0; w];
    for (d, &hw) in hws.iter().enumerate() {
        for yy in 0..h {
            sliding_max(grid.row(yy), hw, &mut ext, &mut g, &mut hb, &mut tmp);
            for target in [yy.checked_sub(d), Some(yy + d)].into_iter().flatten() {
                if target >= h || (d == 0 && target != yy) {
                    continue;
                }
                let row = &mut out[target * w..(target + 1) * w];
                for (o, &t) in row.iter_mut().zip(&tmp) {
                    if t > *o {
                        *o = t;
                    }
                }
            }
        }
    }
    Grid {
        width: w,
        height: h,
        data: out,
    }
}

pub fn erode_disk(grid: &Grid, r: usize) -> Grid {
    dilate_disk(&grid.map(|v| -v), r).map(|v| -v)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-0.5 * x * x / (sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur; samples beyond the edge are clamped.
pub fn gaussian_smooth(grid: &Grid, sigma: f64) -> Grid {
    if sigma <= 0.0 {
        return grid.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (w, h) = (grid.width as isize, grid.height as isize);
    let mut tmp = vec![0.0; grid.len()];
    for y in 0..h {
        let row = grid.row(y as usize);
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = (x + i as isize - r).clamp(0, w - 1);
                acc += kv * row[xx as usize];
            }
            tmp[(y * w + x) as usize] = acc;
        }
    }
    let mut out = vec![0.0; grid.len()];
    for y in 0..h {
        for (i, kv) in k.iter().enumerate() {
            let yy = (y + i as isize - r).clamp(0, h - 1);
            let src = &tmp[(yy * w) as usize..((yy + 1) * w) as usize];
            let dst = &mut out[(y * w) as usize..((y + 1) * w) as usize];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += kv * s;
            }
        }
    }
    Grid {
        width: grid.width,
        height: grid.height,
        data: out,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelopes {
    pub upper: Grid,
    pub lower: Grid,
    pub radius_px: usize,
    pub sigma_px: f64,
}

impl Envelopes {
    pub fn mean(&self) -> Grid {
        Grid {
            width: self.upper.width,
            height: self.upper.height,
            data: self
                .upper
                .data
                .iter()
                .zip(&self.lower.data)
                .map(|(u, l)| 0.5 * (u + l))
                .collect(),
        }
    }
}

/// Structuring-element radius and smoothing σ derived from extremum spacing.
pub fn envelope_scales(
    ext: &Extrema,
    width: usize,
    height: usize,
    sigma_override: Option<f64>,
) -> (usize, f64) {
    let spacing = median_extremum_spacing(ext, width, height).unwrap_or(width.max(height) as f64);
    let radius = ((spacing / 2.0).round() as usize).max(1);
    let sigma = sigma_override.unwrap_or(spacing / 2.0);
    (radius, sigma)
}

pub fn compute_envelopes(grid: &Grid, ext: &Extrema) -> Result<Envelopes> {
    let (r, s) = envelope_scales(ext, grid.width, grid.height, None);
    envelopes_with(grid, ext, r, s)
}

/// Morphological envelopes on a mirror-padded copy, clipped so the upper
/// surface never dips below the signal (and the lower never rises above it).
pub fn envelopes_with(grid: &Grid, ext: &Extrema, radius: usize, sigma: f64) -> Result<Envelopes> {
    if ext.maxima.is_empty() || ext.minima.is_empty() {
        return Err(Error::TooFewExtrema {
            maxima: ext.maxima.len(),
            minima: ext.minima.len(),
        });
    }
    let pad = radius + (3.0 * sigma).ceil() as usize;
    let padded = grid.mirror_pad(pad);
    let up =
        gaussian_smooth(&dilate_disk(&padded, radius), sigma).crop(pad, grid.width, grid.height);
    let lo =
        gaussian_smooth(&erode_disk(&padded, radius), sigma).crop(pad, grid.width, grid.height);
    let upper = Grid {
        width: grid.width,
        height: grid.height,
        data: up
            .data
            .iter()
            .zip(&grid.data)
            .map(|(u, g)| u.max(*g))
            .collect(),
    };
    let lower = Grid {
        width: grid.width,
        height: grid.height,
        data: lo
            .data
            .iter()
            .zip(&grid.data)
            .map(|(l, g)| l.min(*g))
            .collect(),
    };
    Ok(Envelopes {
        upper,
        lower,
        radius_px: radius,
        sigma_px: sigma,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImfStack {
    /// Index 0 holds IMF 1, the finest mode.
    pub imfs: Vec<Grid>,
    pub residual: Grid,
    pub source_checksum: String,
}

impl ImfStack {
    pub fn reconstruct(&self) -> Grid {
        let mut out = self.residual.clone();
        for imf in &self.imfs {
            for (o, v) in out.data.iter_mut().zip(&imf.data) {
                *o += v;
            }
        }
        out
    }

    /// Max elementwise reconstruction error divided by the source range.
    pub fn relative_reconstruction_error(&self, source: &Grid) -> f64 {
        let rec = self.reconstruct();
        let (lo, hi) = source.min_max();
        let range = (hi - lo).max(f64::MIN_POSITIVE);
        rec.data
            .iter()
            .zip(&source.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            / range
    }
}

pub fn grid_checksum(grid: &Grid) -> String {
    let mut h = Sha256::new();
    h.update((grid.width as u64).to_le_bytes());
    h.update((grid.height as u64).to_le_bytes());
    for v in &grid.data {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn has_enough_extrema(ext: &Extrema) -> bool {
    ext.maxima.len() >= 2 && ext.minima.len() >= 2
}

pub fn decompose(map: &Grid, params: &SiftParams) -> Result<ImfStack> {
    params.validate()?;
    let mut working = map.clone();
    let mut imfs = Vec::new();
    while imfs.len() < params.max_imfs {
        let ext = find_extrema(&working);
        if !has_enough_extrema(&ext) {
            break;
        }
        let (radius, sigma) = envelope_scales(
            &ext,
            working.width,
            working.height,
            params.envelope_smooth_sigma_px,
        );
        let mut h = working.clone();
        let mut ext_h = ext;
        for _ in 0..params.max_sift_iters {
            if !has_enough_extrema(&ext_h) {
                break;
            }
            let mean = envelopes_with(&h, &ext_h, radius, sigma)?.mean();
            let num: f64 = mean.data.iter().map(|m| m * m).sum();
            let den: f64 = h.data.iter().map(|v| v * v).sum();
            for (v, m) in h.data.iter_mut().zip(&mean.data) {
                *v -= m;
            }
            if den == 0.0 || num / den < params.sd_threshold {
                break;
            }
            ext_h = find_extrema(&h);
        }
        for (w, v) in working.data.iter_mut().zip(&h.data) {
            *w -= v;
        }
        imfs.push(h);
    }
    Ok(ImfStack {
        imfs,
        residual: working,
        source_checksum: grid_checksum(map),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthScaleEstimate {
    pub imf_index: usize,
    /// Power-weighted mean radial frequency, cycles per millimetre.
    pub mean_frequency: f64,
    pub length_mm: f64,
}

/// `|F(k)|²` of the 2D DFT, row-major with the same layout as the input.
pub fn power_spectrum(grid: &Grid) -> Vec<f64> {
    let (w, h) = (grid.width, grid.height);
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);
    let mut buf: Vec<Complex64> = grid.data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    buf.iter().map(|c| c.norm_sqr()).collect()
}

fn signed_freq(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64 / n as f64
    } else {
        (i as f64 - n as f64) / n as f64
    }
}

/// Characteristic length `1 / f̄`, with `f̄ = Σ|F|²·|k| / Σ|F|²` over non-DC bins.
pub fn length_scale(grid: &Grid, pitch_um: f64, imf_index: usize) -> Result<LengthScaleEstimate> {
    if grid.width < 8 || grid.height < 8 {
        return Err(Error::invalid("length scale needs at least an 8x8 grid"));
    }
    if !(pitch_um > 0.0) {
        return Err(Error::invalid("pitch must be > 0"));
    }
    let power = power_spectrum(grid);
    let pitch_mm = pitch_um / 1000.0;
    let (mut num, mut den) = (0.0, 0.0);
    for y in 0..grid.height {
        let ky = signed_freq(y, grid.height) / pitch_mm;
        for x in 0..grid.width {
            if x == 0 && y == 0 {
                continue;
            }
            let kx = signed_freq(x, grid.width) / pitch_mm;
            let p = power[y * grid.width + x];
            num += p * (kx * kx + ky * ky).sqrt();
            den += p;
        }
    }
    let scale = grid.data.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if !(den > 1e-24 * scale * scale * grid.len() as f64) || den == 0.0 {
        return Err(Error::Degenerate(
            "grid has no non-DC spectral power".into(),
        ));
    }
    let f = num / den;
    Ok(LengthScaleEstimate {
        imf_index,
        mean_frequency: f,
        length_mm: 1.0 / f,
    })
}
