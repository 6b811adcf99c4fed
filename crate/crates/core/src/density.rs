//! Per-artist kernel density estimates of single-pixel heights and
//! maximum-likelihood patch attribution.
//!
//! The baseline ignores spatial correlation entirely: a patch is scored by
//! `L_i = Σ_j log P_i(z_j)` and attributed to the artist with the largest
//! `L_i`.

use std::f64::consts::PI;
use std::io::Write;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied before taking logs so out-of-support pixels stay finite.
pub const DENSITY_FLOOR: f64 = 1e-300;
pub const MIN_TABLE_POINTS: usize = 2048;
const MAX_TABLE_POINTS: usize = 1 << 20;
/// Table spacing as a fraction of the bandwidth; keeps linear interpolation
/// error in log-density below ~1e-6 for smooth fits.
const STEP_PER_BANDWIDTH: f64 = 0.0025;
/// Support half-margin beyond the sample range, in bandwidths.
const SUPPORT_MARGIN: f64 = 6.0;
/// Below this many samples the table is summed kernel by kernel.
const EXACT_SUM_LIMIT: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthRule {
    /// `0.9 · min(σ̂, IQR/1.34) · n^(-1/5)`
    #[default]
    SilvermanRobust,
    /// `1.06 · σ̂ · n^(-1/5)`
    SilvermanNormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityModel {
    pub artist_id: u8,
    pub sample_count: usize,
    pub bandwidth_um: f64,
    pub z_min: f64,
    pub z_step: f64,
    pub log_density: Vec<f64>,
}

fn sample_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Linear-interpolated quantile of sorted data (Hyndman–Fan type 7).
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn bandwidth(samples: &[f64], rule: BandwidthRule) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Degenerate("KDE needs at least two samples".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("KDE samples must be finite"));
    }
    let sigma = sample_std(samples);
    if !(sigma > 0.0) {
        return Err(Error::Degenerate("samples have zero spread".into()));
    }
    let n_factor = (samples.len() as f64).powf(-0.2);
    Ok(match rule {
        BandwidthRule::SilvermanNormal => 1.06 * sigma * n_factor,
        BandwidthRule::SilvermanRobust => {
            let mut sorted = samples.to_vec();
            sorted.sort_by(f64::total_cmp);
            let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
            let spread = if iqr > 0.0 {
                sigma.min(iqr / 1.34)
            } else {
                sigma
            };
            0.9 * spread * n_factor
        }
    })
}

#[inline]
fn gauss(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * PI).sqrt()
}

pub fn fit_kde(samples: &[f64], artist_id: u8) -> Result<DensityModel> {
    fit_kde_with(samples, artist_id, BandwidthRule::default())
}

/// Gaussian KDE tabulated on a uniform grid over `[min − 6h, max + 6h]`.
///
/// Small samples are summed exactly; large ones are linearly binned onto the
/// table grid and convolved with the sampled kernel by FFT.
pub fn fit_kde_with(samples: &[f64], artist_id: u8, rule: BandwidthRule) -> Result<DensityModel> {
    let h = bandwidth(samples, rule)?;
    let (lo, hi) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let z_min = lo - SUPPORT_MARGIN * h;
    let z_max = hi + SUPPORT_MARGIN * h;
    let points = (((z_max - z_min) / (STEP_PER_BANDWIDTH * h)).ceil() as usize + 1)
        .clamp(MIN_TABLE_POINTS, MAX_TABLE_POINTS)
        | 1; // odd count puts the support midpoint on a node
    let z_step = (z_max - z_min) / (points - 1) as f64;
    let n = samples.len() as f64;

    let density: Vec<f64> = if samples.len() <= EXACT_SUM_LIMIT {
        (0..points)
            .map(|i| {
                let z = z_min + i as f64 * z_step;
                samples.iter().map(|&s| gauss((z - s) / h)).sum::<f64>() / (n * h)
            })
            .collect()
    } else {
        binned_density(samples, z_min, z_step, points, h)
    };

    Ok(DensityModel {
        artist_id,
        sample_count: samples.len(),
        bandwidth_um: h,
        z_min,
        z_step,
        log_density: density
            .into_iter()
            .map(|d| d.max(DENSITY_FLOOR).ln())
            .collect(),
    })
}

fn binned_density(samples: &[f64], z_min: f64, z_step: f64, points: usize, h: f64) -> Vec<f64> {
    let mut bins = vec![0.0f64; points];
    for &s in samples {
        let pos = (s - z_min) / z_step;
        let i = (pos.floor() as usize).min(points - 2);
        let f = pos - i as f64;
        bins[i] += 1.0 - f;
        bins[i + 1] += f;
    }
    let reach = ((8.0 * h / z_step).ceil() as usize).min(points);
    let len = (points + reach + 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);

    let mut a: Vec<Complex64> = bins.iter().map(|&b| Complex64::new(b, 0.0)).collect();
    a.resize(len, Complex64::new(0.0, 0.0));
    let mut k = vec![Complex64::new(0.0, 0.0); len];
    for d in 0..=reach {
        let w = gauss(d as f64 * z_step / h);
        k[d] = Complex64::new(w, 0.0);
        if d > 0 {
            k[len - d] = Complex64::new(w, 0.0);
        }
    }
    fwd.process(&mut a);
    fwd.process(&mut k);
    for (x, y) in a.iter_mut().zip(&k) {
        *x *= y;
    }
    inv.process(&mut a);
    let norm = 1.0 / (len as f64 * samples.len() as f64 * h);
    a[..points].iter().map(|c| (c.re * norm).max(0.0)).collect()
}

impl DensityModel {
    pub fn z_max(&self) -> f64 {
        self.z_min + (self.log_density.len() - 1) as f64 * self.z_step
    }

    /// Log-density by linear interpolation; the floor outside the support.
    pub fn log_pdf(&self, z: f64) -> f64 {
        let pos = (z - self.z_min) / self.z_step;
        let last = self.log_density.len() - 1;
        if !(pos >= 0.0 && pos <= last as f64) {
            return DENSITY_FLOOR.ln();
        }
        let i = (pos.floor() as usize).min(last - 1);
        let f = pos - i as f64;
        self.log_density[i] * (1.0 - f) + self.log_density[i + 1] * f
    }

    pub fn pdf_table(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.log_density
            .iter()
            .enumerate()
            .map(|(i, &l)| (self.z_min + i as f64 * self.z_step, l.exp()))
    }

    /// Trapezoid integral of the tabulated density.
    pub fn integral(&self) -> f64 {
        let d: Vec<f64> = self.log_density.iter().map(|l| l.exp()).collect();
        let inner: f64 = d[1..d.len() - 1].iter().sum();
        self.z_step * (inner + 0.5 * (d[0] + d[d.len() - 1]))
    }

    /// Location of the table maximum.
    pub fn mode(&self) -> f64 {
        let i = self
            .log_density
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        self.z_min + i as f64 * self.z_step
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "z_um,density")?;
        for (z, d) in self.pdf_table() {
            writeln!(w, "{z:.6},{d:.9e}")?;
        }
        Ok(())
    }
}

pub fn patch_log_likelihood(heights: &[f64], model: &DensityModel) -> Result<f64> {
    if heights.is_empty() {
        return Err(Error::invalid("empty patch"));
    }
    Ok(heights.iter().map(|&z| model.log_pdf(z)).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionScore {
    pub log_likelihoods: Vec<f64>,
    pub winner: u8,
    pub margin: f64,
}

/// Pick the model with the largest log-likelihood; ties go to the earliest model.
pub fn mle_attribute(heights: &[f64], models: &[DensityModel]) -> Result<AttributionScore> {
    if models.is_empty() {
        return Err(Error::invalid("no density models"));
    }
    let lls = models
        .iter()
        .map(|m| patch_log_likelihood(heights, m))
        .collect::<Result<Vec<_>>>()?;
    Ok(score_from_likelihoods(
        lls,
        models.iter().map(|m| m.artist_id),
    ))
}

pub(crate) fn score_from_likelihoods(
    lls: Vec<f64>,
    ids: impl Iterator<Item = u8>,
) -> AttributionScore {
    let ids: Vec<u8> = ids.collect();
    let mut best = 0;
    for i in 1..lls.len() {
        if lls[i] > lls[best] {
            best = i;
        }
    }
    let runner_up = lls
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != best)
        .map(|(_, &l)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let margin = if lls.len() > 1 {
        lls[best] - runner_up
    } else {
        0.0
    };
    AttributionScore {
        winner: ids[best],
        margin,
        log_likelihoods: lls,
    }
}

impl AttributionScore {
    /// Posterior under a uniform prior, `p_i ∝ exp(L_i − L_max)`.
    pub fn posterior(&self) -> Vec<f64> {
        let max = self
            .log_likelihoods
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = self
            .log_likelihoods
            .iter()
            .map(|l| (l - max).exp())
            .collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_samples(n: usize, seed: u64, mean: f64, sd: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                mean + sd * z
            })
            .collect()
    }

    #[test]
    fn silverman_closed_form() {
        // rescale so the sample std is exactly 1 and IQR/1.34 exceeds it
        let raw = normal_samples(100, 2, 0.0, 1.0);
        let mean = raw.iter().sum::<f64>() / 100.0;
        let sd = sample_std(&raw);
        let xs: Vec<f64> = raw.iter().map(|x| (x - mean) / sd).collect();
        let mut s = xs.clone();
        s.sort_by(f64::total_cmp);
        let iqr = quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25);
        let h = bandwidth(&xs, BandwidthRule::SilvermanRobust).unwrap();
        let expected = 0.9 * sample_std(&xs).min(iqr / 1.34) * 100f64.powf(-0.2);
        assert!((h - expected).abs() < 1e-12);
        if iqr / 1.34 >= 1.0 {
            assert!((h - 0.9 * 100f64.powf(-0.2)).abs() < 1e-12);
        }
        assert!((0.9 * 100f64.powf(-0.2) - 0.3583).abs() < 1e-4);
    }

    #[test]
    fn two_sample_closed_form() {
        let m = fit_kde(&[-1.0, 1.0], 1).unwrap();
        let h = m.bandwidth_um;
        let phi = |u: f64| (-0.5 * u * u).exp() / (2.0 * PI).sqrt();
        let expected = phi(1.0 / h) / h;
        // 0 lies exactly on the symmetric table midpoint
        let got = m.log_pdf(0.0).exp();
        assert!(
            (got - expected).abs() / expected < 1e-9,
            "{got} vs {expected}"
        );
    }

    #[test]
    fn tables_integrate_to_one() {
        for (n, seed) in [(2usize, 1u64), (50, 2), (5000, 3), (200_000, 4)] {
            let xs = normal_samples(n, seed, 10.0, 30.0);
            let m = fit_kde(&xs, 1).unwrap();
            assert!((m.integral() - 1.0).abs() < 1e-3, "n={n}: {}", m.integral());
            assert!(m.log_density.len() >= MIN_TABLE_POINTS);
        }
    }

    #[test]
    fn binned_route_matches_exact_route() {
        let xs = normal_samples(EXACT_SUM_LIMIT + 1, 8, 0.0, 20.0);
        let binned = fit_kde(&xs, 1).unwrap();
        let h = binned.bandwidth_um;
        for &z in &[-40.0, -5.0, 0.0, 12.5, 33.0] {
            let exact = xs.iter().map(|&s| gauss((z - s) / h)).sum::<f64>() / (xs.len() as f64 * h);
            let got = binned.log_pdf(z).exp();
            assert!(
                (got - exact).abs() / exact < 1e-4,
                "z={z}: {got} vs {exact}"
            );
        }
    }

    #[test]
    fn degenerate_samples_rejected() {
        assert!(fit_kde(&[3.0, 3.0, 3.0], 1).is_err());
        assert!(fit_kde(&[3.0], 1).is_err());
    }

    #[test]
    fn log_likelihood_sums() {
        let m = fit_kde(&normal_samples(500, 5, 0.0, 1.0), 1).unwrap();
        let mode = m.mode();
        let peak = m
            .log_density
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((patch_log_likelihood(&[mode], &m).unwrap() - peak).abs() < 1e-12);

        let patch = normal_samples(64, 6, 0.3, 1.0);
        let doubled: Vec<f64> = patch.iter().chain(&patch).cloned().collect();
        let l1 = patch_log_likelihood(&patch, &m).unwrap();
        let l2 = patch_log_likelihood(&doubled, &m).unwrap();
        assert!((l2 - 2.0 * l1).abs() <= 1e-12 * l1.abs());
        assert!(patch_log_likelihood(&[], &m).is_err());
        assert_eq!(m.log_pdf(1e9), DENSITY_FLOOR.ln());
    }

    #[test]
    fn ties_go_to_lowest_artist() {
        let xs = normal_samples(300, 7, 0.0, 1.0);
        let models: Vec<DensityModel> = (1..=4).map(|a| fit_kde(&xs, a).unwrap()).collect();
        let s = mle_attribute(&[0.1, -0.2, 0.5], &models).unwrap();
        assert_eq!(s.winner, 1);
        assert_eq!(s.margin, 0.0);
        assert!(s.log_likelihoods.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn dominant_model_wins() {
        let base = normal_samples(300, 9, 0.0, 10.0);
        let shifted: Vec<f64> = base.iter().map(|v| v + 100.0).collect();
        let models = vec![
            fit_kde(&shifted, 1).unwrap(),
            fit_kde(&base, 2).unwrap(),
            fit_kde(&shifted, 3).unwrap(),
            fit_kde(&shifted, 4).unwrap(),
        ];
        let s = mle_attribute(&vec![0.0; 100], &models).unwrap();
        assert_eq!(s.winner, 2);
        assert!(s.margin > 0.0);
        let post = s.posterior();
        assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn refit_on_shifted_data_keeps_winner() {
        let models: Vec<Vec<f64>> = (0..4)
            .map(|i| normal_samples(400, 20 + i, i as f64 * 3.0, 5.0))
            .collect();
        let patch = normal_samples(50, 99, 6.0, 5.0);
        let fit = |shift: f64| -> u8 {
            let ms: Vec<DensityModel> = models
                .iter()
                .enumerate()
                .map(|(i, xs)| {
                    fit_kde(
                        &xs.iter().map(|v| v + shift).collect::<Vec<_>>(),
                        i as u8 + 1,
                    )
                    .unwrap()
                })
                .collect();
            let p: Vec<f64> = patch.iter().map(|v| v + shift).collect();
            mle_attribute(&p, &ms).unwrap().winner
        };
        assert_eq!(fit(0.0), fit(250.0));
    }

    proptest! {
        #[test]
        fn winner_invariant_under_monotone_transform(lls in proptest::collection::vec(-1e4f64..1e4, 4), a in 0.1f64..10.0, b in -100.0f64..100.0) {
            let base = score_from_likelihoods(lls.clone(), 1..=4u8);
            let transformed = score_from_likelihoods(lls.iter().map(|l| a * l + b).collect(), 1..=4u8);
            let cubed = score_from_likelihoods(lls.iter().map(|l| l.powi(3)).collect(), 1..=4u8);
            prop_assert_eq!(base.winner, transformed.winner);
            prop_assert_eq!(base.winner, cubed.winner);
        }
    }
}
