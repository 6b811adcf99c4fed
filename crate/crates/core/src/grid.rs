use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major 2D field of `f64` samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width * height != data.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{width}x{height} = {} samples", width * height),
                actual: format!("{} samples", data.len()),
            });
        }
        Ok(Grid {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Grid {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Grid {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copy of the `side`×`side` window whose top-left corner is `(x0, y0)`.
    pub fn window(&self, x0: usize, y0: usize, side: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(side * side);
        for y in y0..y0 + side {
            out.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + side]);
        }
        out
    }

    /// Mirror-pad (reflect without repeating the edge sample) by `pad` on every side.
    pub fn mirror_pad(&self, pad: usize) -> Grid {
        let w = self.width as isize;
        let h = self.height as isize;
        let reflect = |i: isize, n: isize| -> usize {
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let mut m = i.rem_euclid(period);
            if m >= n {
                m = period - m;
            }
            m as usize
        };
        let pw = self.width + 2 * pad;
        let ph = self.height + 2 * pad;
        let mut data = Vec::with_capacity(pw * ph);
        for y in 0..ph as isize {
            let sy = reflect(y - pad as isize, h);
            for x in 0..pw as isize {
                let sx = reflect(x - pad as isize, w);
                data.push(self.data[sy * self.width + sx]);
            }
        }
        Grid {
            width: pw,
            height: ph,
            data,
        }
    }

    /// Inverse of [`Grid::mirror_pad`].
    pub fn crop(&self, pad: usize, width: usize, height: usize) -> Grid {
        let mut data = Vec::with_capacity(width * height);
        for y in pad..pad + height {
            let start = y * self.width + pad;
            data.extend_from_slice(&self.data[start..start + width]);
        }
        Grid {
            width,
            height,
            data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mirror_pad_then_crop_is_identity() {
        let g = Grid::from_fn(5, 3, |x, y| (x * 10 + y) as f64);
        let p = g.mirror_pad(4);
        assert_eq!(p.width, 13);
        assert_eq!(p.get(3, 4), g.get(1, 0));
        assert_eq!(p.crop(4, 5, 3), g);
    }

    #[test]
    fn shape_is_checked() {
        assert!(Grid::new(3, 3, vec![0.0; 8]).is_err());
    }
}
