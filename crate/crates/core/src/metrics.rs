//! Confusion matrices and per-artist scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CLASSES: usize = 4;

/// Rows are the true artist, columns the predicted artist (both 1-based in the API).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; CLASSES]; CLASSES],
}

impl ConfusionMatrix {
    pub fn add(&mut self, truth: u8, predicted: u8) -> Result<()> {
        let t = label_index(truth)?;
        let p = label_index(predicted)?;
        self.counts[t][p] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..CLASSES).map(|i| self.counts[i][i]).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for i in 0..CLASSES {
            for j in 0..CLASSES {
                self.counts[i][j] += other.counts[i][j];
            }
        }
    }
}

fn label_index(label: u8) -> Result<usize> {
    if (1..=CLASSES as u8).contains(&label) {
        Ok(usize::from(label - 1))
    } else {
        Err(Error::LabelOutOfRange(label))
    }
}

/// Build a confusion matrix from `(true, predicted)` label pairs.
pub fn confusion(predictions: &[(u8, u8)]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::default();
    for &(t, p) in predictions {
        cm.add(t, p)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub accuracy: f64,
    pub f1: [f64; CLASSES],
    pub precision: [f64; CLASSES],
    pub recall: [f64; CLASSES],
    /// Number of repeats aggregated into this report (1 for a single run).
    pub trials: usize,
    /// Sample standard deviation of accuracy across trials (0 for one trial).
    pub acc_std: f64,
}

fn ratio(num: u64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num as f64 / den
    }
}

pub fn scores(cm: &ConfusionMatrix) -> Result<ScoreReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::invalid("cannot score an empty confusion matrix"));
    }
    let mut f1 = [0.0; CLASSES];
    let mut precision = [0.0; CLASSES];
    let mut recall = [0.0; CLASSES];
    for i in 0..CLASSES {
        let tp = cm.counts[i][i];
        let col: u64 = (0..CLASSES).map(|r| cm.counts[r][i]).sum();
        let row: u64 = cm.counts[i].iter().sum();
        let fp = col - tp;
        let fn_ = row - tp;
        f1[i] = ratio(tp, tp as f64 + 0.5 * (fp + fn_) as f64);
        precision[i] = ratio(tp, (tp + fp) as f64);
        recall[i] = ratio(tp, (tp + fn_) as f64);
    }
    Ok(ScoreReport {
        accuracy: cm.trace() as f64 / total as f64,
        f1,
        precision,
        recall,
        trials: 1,
        acc_std: 0.0,
    })
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Average repeated trials: scores are means, `acc_std` is the spread of accuracy.
pub fn aggregate(reports: &[ScoreReport]) -> Result<ScoreReport> {
    if reports.is_empty() {
        return Err(Error::invalid("no reports to aggregate"));
    }
    let n = reports.len() as f64;
    let accs: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
    let (accuracy, acc_std) = mean_std(&accs);
    let avg = |f: &dyn Fn(&ScoreReport) -> [f64; CLASSES]| {
        let mut out = [0.0; CLASSES];
        for r in reports {
            for (o, v) in out.iter_mut().zip(f(r)) {
                *o += v / n;
            }
        }
        out
    };
    Ok(ScoreReport {
        accuracy,
        f1: avg(&|r| r.f1),
        precision: avg(&|r| r.precision),
        recall: avg(&|r| r.recall),
        trials: reports.len(),
        acc_std,
    })
}

pub const SCORE_CSV_HEADER: &str = "config_id,patch_px,accuracy,f1_1,f1_2,f1_3,f1_4,prec_1,prec_2,prec_3,prec_4,rec_1,rec_2,rec_3,rec_4,trials,acc_std";

impl ScoreReport {
    pub fn csv_row(&self, config_id: &str, patch_px: usize) -> String {
        let mut fields = vec![
            config_id.to_string(),
            patch_px.to_string(),
            fmt(self.accuracy),
        ];
        fields.extend(self.f1.iter().map(|&v| fmt(v)));
        fields.extend(self.precision.iter().map(|&v| fmt(v)));
        fields.extend(self.recall.iter().map(|&v| fmt(v)));
        fields.push(self.trials.to_string());
        fields.push(fmt(self.acc_std));
        fields.join(",")
    }
}

pub(crate) fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_and_simple() {
        assert_eq!(confusion(&[]).unwrap().total(), 0);
        let cm = confusion(&[(1, 1), (1, 2)]).unwrap();
        assert_eq!(cm.counts[0], [1, 1, 0, 0]);
        assert!(confusion(&[(0, 1)]).is_err());
        assert!(confusion(&[(1, 5)]).is_err());
        assert!(scores(&ConfusionMatrix::default()).is_err());
    }

    #[test]
    fn order_independent() {
        let mut preds = vec![(1, 2), (3, 3), (4, 1), (2, 2), (1, 1)];
        let a = confusion(&preds).unwrap();
        preds.reverse();
        assert_eq!(a, confusion(&preds).unwrap());
    }

    #[test]
    fn f1_spot_value() {
        // artist 1: TP 8, FP 2 (column), FN 2 (row)
        let mut cm = ConfusionMatrix::default();
        cm.counts[0][0] = 8;
        cm.counts[0][1] = 2;
        cm.counts[2][0] = 2;
        cm.counts[3][3] = 5;
        let s = scores(&cm).unwrap();
        assert!((s.f1[0] - 0.8).abs() < 1e-15);
        assert!((s.precision[0] - 0.8).abs() < 1e-15);
        assert!((s.recall[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn perfect_diagonal() {
        let mut cm = ConfusionMatrix::default();
        for i in 0..4 {
            cm.counts[i][i] = 10;
        }
        let s = scores(&cm).unwrap();
        assert_eq!(s.accuracy, 1.0);
        assert!(s.f1.iter().all(|&f| f == 1.0));
    }

    #[test]
    fn zero_denominators_score_zero() {
        let mut cm = ConfusionMatrix::default();
        cm.counts[0][0] = 3;
        let s = scores(&cm).unwrap();
        assert_eq!(s.f1[1], 0.0);
        assert_eq!(s.precision[2], 0.0);
        assert_eq!(s.recall[3], 0.0);
    }

    #[test]
    fn f1_is_harmonic_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let preds: Vec<(u8, u8)> = (0..50)
                .map(|_| (rng.gen_range(1..=4), rng.gen_range(1..=4)))
                .collect();
            let s = scores(&confusion(&preds).unwrap()).unwrap();
            for i in 0..4 {
                let (p, r) = (s.precision[i], s.recall[i]);
                if p > 0.0 && r > 0.0 {
                    assert!((s.f1[i] - 2.0 * p * r / (p + r)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn aggregate_uses_sample_std() {
        let mk = |a| ScoreReport {
            accuracy: a,
            f1: [a; 4],
            precision: [a; 4],
            recall: [a; 4],
            trials: 1,
            acc_std: 0.0,
        };
        let agg = aggregate(&[mk(0.5), mk(0.7), mk(0.9)]).unwrap();
        assert!((agg.accuracy - 0.7).abs() < 1e-12);
        assert!((agg.acc_std - 0.2).abs() < 1e-12);
        assert_eq!(agg.trials, 3);
    }

    #[test]
    fn csv_row_has_all_columns() {
        let mut cm = ConfusionMatrix::default();
        cm.counts[1][1] = 1;
        let row = scores(&cm).unwrap().csv_row("cfg", 100);
        assert_eq!(row.split(',').count(), SCORE_CSV_HEADER.split(',').count());
    }
}
