//! Minimal text-free raster charts.

use crate::error::{Error, Result};
use crate::synth::encode_png;

const WIDTH: usize = 640;
const HEIGHT: usize = 400;
const MARGIN: usize = 40;

pub const SERIES_COLORS: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [140, 86, 75],
];

/// `(x, y, error)` points drawn as a polyline with vertical error bars.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub points: Vec<(f64, f64, f64)>,
    pub dashed: bool,
}

/// `(value, error)` bars sharing one x slot.
#[derive(Debug, Clone, PartialEq)]
pub struct BarGroup {
    pub bars: Vec<(f64, f64)>,
}

struct Canvas {
    rgb: Vec<u8>,
    y_range: (f64, f64),
}

impl Canvas {
    fn new(y_range: (f64, f64)) -> Result<Self> {
        if !(y_range.1 > y_range.0) {
            return Err(Error::invalid("plot y range must be increasing"));
        }
        let mut c = Canvas {
            rgb: vec![255; WIDTH * HEIGHT * 3],
            y_range,
        };
        for q in 1..4 {
            let y = c.py(y_range.0 + (y_range.1 - y_range.0) * q as f64 / 4.0);
            c.line(
                (MARGIN as f64, y),
                ((WIDTH - MARGIN) as f64, y),
                [220, 220, 220],
                false,
            );
        }
        let (x0, y0) = (MARGIN as f64, (HEIGHT - MARGIN) as f64);
        c.line((x0, y0), ((WIDTH - MARGIN) as f64, y0), [0, 0, 0], false);
        c.line((x0, y0), (x0, MARGIN as f64), [0, 0, 0], false);
        Ok(c)
    }

    fn py(&self, v: f64) -> f64 {
        let t = ((v - self.y_range.0) / (self.y_range.1 - self.y_range.0)).clamp(0.0, 1.0);
        (HEIGHT - MARGIN) as f64 - t * (HEIGHT - 2 * MARGIN) as f64
    }

    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if (0..WIDTH as i64).contains(&x) && (0..HEIGHT as i64).contains(&y) {
            let i = (y as usize * WIDTH + x as usize) * 3;
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), c: [u8; 3], dashed: bool) {
        let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
        for s in 0..=steps {
            if dashed && (s / 6) % 2 == 1 {
                continue;
            }
            let t = s as f64 / steps as f64;
            let x = (a.0 + (b.0 - a.0) * t).round() as i64;
            let y = (a.1 + (b.1 - a.1) * t).round() as i64;
            self.put(x, y, c);
            self.put(x, y + 1, c);
        }
    }

    fn rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, c: [u8; 3]) {
        for y in y0.min(y1).round() as i64..=y0.max(y1).round() as i64 {
            for x in x0.min(x1).round() as i64..=x0.max(x1).round() as i64 {
                self.put(x, y, c);
            }
        }
    }

    fn png(&self) -> Result<Vec<u8>> {
        encode_png(WIDTH, HEIGHT, image::ColorType::Rgb8, &self.rgb)
    }
}

/// Line chart on a logarithmic x axis.
pub fn line_chart(series: &[Series], y_range: (f64, f64)) -> Result<Vec<u8>> {
    let mut canvas = Canvas::new(y_range)?;
    let xs: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .filter(|&x| x > 0.0)
        .collect();
    if xs.is_empty() {
        return canvas.png();
    }
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min).ln();
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ln();
    let span = (hi - lo).max(1e-9);
    let plot_w = (WIDTH - 2 * MARGIN - 20) as f64;
    let px = |x: f64| MARGIN as f64 + 10.0 + (x.max(1e-12).ln() - lo) / span * plot_w;
    for (i, s) in series.iter().enumerate() {
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        let pts: Vec<(f64, f64)> = s
            .points
            .iter()
            .map(|&(x, y, _)| (px(x), canvas.py(y)))
            .collect();
        for w in pts.windows(2) {
            canvas.line(w[0], w[1], color, s.dashed);
        }
        for (&(_, y, err), &(cx, cy)) in s.points.iter().zip(&pts) {
            if err > 0.0 {
                canvas.line(
                    (cx, canvas.py(y - err)),
                    (cx, canvas.py(y + err)),
                    color,
                    false,
                );
            }
            canvas.rect(cx - 2.0, cy - 2.0, cx + 2.0, cy + 2.0, color);
        }
    }
    canvas.png()
}

/// Grouped bar chart; bar `j` of every group shares color `j`.
pub fn bar_chart(groups: &[BarGroup], y_range: (f64, f64)) -> Result<Vec<u8>> {
    let mut canvas = Canvas::new(y_range)?;
    if groups.is_empty() {
        return canvas.png();
    }
    let slot = (WIDTH - 2 * MARGIN) as f64 / groups.len() as f64;
    let base = canvas.py(y_range.0);
    for (g, group) in groups.iter().enumerate() {
        let n = group.bars.len().max(1) as f64;
        let bar_w = slot * 0.8 / n;
        for (j, &(v, err)) in group.bars.iter().enumerate() {
            let color = SERIES_COLORS[j % SERIES_COLORS.len()];
            let x0 = MARGIN as f64 + g as f64 * slot + slot * 0.1 + j as f64 * bar_w;
            let top = canvas.py(v);
            canvas.rect(x0 + 1.0, top, x0 + bar_w - 2.0, base - 1.0, color);
            if err > 0.0 {
                let cx = x0 + bar_w / 2.0;
                canvas.line(
                    (cx, canvas.py(v - err)),
                    (cx, canvas.py(v + err)),
                    [0, 0, 0],
                    false,
                );
            }
        }
    }
    canvas.png()
}
