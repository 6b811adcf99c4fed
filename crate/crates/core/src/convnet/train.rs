use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::network::Network;
use crate::error::{Error, Result};
use crate::patching::{DatasetSplit, Patch};
use crate::seed::rng_for;
use crate::surface::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub phase1: Phase,
    pub phase2: Phase,
    /// Number of trailing conv blocks updated in phase 2; `None` trains all.
    /// Dense layers are always trainable.
    pub phase2_trainable_blocks: Option<usize>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            phase1: Phase {
                learning_rate: 1e-3,
                epochs: 25,
                batch_size: 32,
            },
            phase2: Phase {
                learning_rate: 1e-4,
                epochs: 25,
                batch_size: 32,
            },
            phase2_trainable_blocks: None,
        }
    }
}

impl TrainSchedule {
    pub fn with_epochs(phase1: usize, phase2: usize) -> Self {
        let mut s = TrainSchedule::default();
        s.phase1.epochs = phase1;
        s.phase2.epochs = phase2;
        s
    }

    pub fn validate(&self) -> Result<()> {
        for p in [&self.phase1, &self.phase2] {
            if !(p.learning_rate > 0.0) || !p.learning_rate.is_finite() {
                return Err(Error::invalid("learning rates must be positive"));
            }
            if p.batch_size == 0 {
                return Err(Error::invalid("batch size must be >= 1"));
            }
        }
        if self.phase1.epochs + self.phase2.epochs == 0 {
            return Err(Error::invalid("training schedule has zero epochs"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: u8,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

pub const EPOCH_LOG_HEADER: &str = "phase,epoch,train_loss,val_acc";

#[derive(Debug, Clone)]
pub struct TrainedNetwork {
    pub network: Network<f32>,
    pub log: Vec<EpochRecord>,
    pub best_val_acc: f64,
    pub seed: u64,
}

/// Concatenate patch values into one batch buffer with 1-based labels.
pub fn pack_patches(patches: &[Patch]) -> (Vec<f32>, Vec<u8>) {
    let mut x = Vec::with_capacity(patches.iter().map(|p| p.values.len()).sum());
    let mut y = Vec::with_capacity(patches.len());
    for p in patches {
        x.extend_from_slice(&p.values);
        y.push(p.artist_id);
    }
    (x, y)
}

fn channel_stats(x: &[f32], channels: usize, plane: usize) -> (Vec<f32>, Vec<f32>) {
    let mut sum = vec![0.0f64; channels];
    let mut sq = vec![0.0f64; channels];
    let mut n = vec![0usize; channels];
    for (i, chunk) in x.chunks_exact(plane).enumerate() {
        let c = i % channels;
        for &v in chunk {
            sum[c] += f64::from(v);
            sq[c] += f64::from(v) * f64::from(v);
        }
        n[c] += plane;
    }
    let mut shift = vec![0.0; channels];
    let mut scale = vec![1.0; channels];
    for c in 0..channels {
        if n[c] == 0 {
            continue;
        }
        let mean = sum[c] / n[c] as f64;
        let var = (sq[c] / n[c] as f64 - mean * mean).max(0.0);
        shift[c] = mean as f32;
        scale[c] = if var > 1e-12 {
            (1.0 / var.sqrt()) as f32
        } else {
            1.0
        };
    }
    (shift, scale)
}

fn accuracy(net: &Network<f32>, x: &[f32], y: &[u8]) -> Result<f64> {
    let probs = net.predict(x, y.len())?;
    let hits = probs
        .iter()
        .zip(y)
        .filter(|(p, &l)| p.argmax() == l)
        .count();
    Ok(hits as f64 / y.len() as f64)
}

fn frozen_ranges(net: &Network<f32>, trainable_blocks: Option<usize>) -> Vec<Range<usize>> {
    let Some(keep) = trainable_blocks else {
        return Vec::new();
    };
    let blocks = net.config.conv_filters.len();
    let first_trainable = blocks.saturating_sub(keep);
    net.layout()
        .iter()
        .filter(|s| s.block.is_some_and(|b| b < first_trainable))
        .map(|s| s.range())
        .collect()
}

/// Two-phase training keeping the best-validation weights of each phase;
/// phase 2 restarts Adam from the phase-1 best at its own learning rate.
pub fn train(
    network: Network<f32>,
    split: &DatasetSplit,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<TrainedNetwork> {
    schedule.validate()?;
    if split.train.is_empty() || split.validation.is_empty() {
        return Err(Error::invalid(
            "training needs non-empty train and validation sets",
        ));
    }
    let mut net = network;
    let cfg = net.config.clone();
    let (x_train, y_train) = pack_patches(&split.train);
    let (x_val, y_val) = pack_patches(&split.validation);
    let per = cfg.input_len();
    if x_train.len() != per * y_train.len() || x_val.len() != per * y_val.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{per} values per patch"),
            actual: "patches of a different shape".into(),
        });
    }
    if cfg.standardize_inputs {
        let plane = cfg.input_side_px * cfg.input_side_px;
        let (shift, scale) = channel_stats(&x_train, cfg.in_channels, plane);
        net.input_shift = shift;
        net.input_scale = scale;
    }

    let mut log = Vec::new();
    let mut best_overall = -1.0;
    let mut order: Vec<usize> = (0..y_train.len()).collect();
    let mut xb: Vec<f32> = Vec::new();
    let mut yb: Vec<u8> = Vec::new();
    for (phase_idx, phase) in [(1u8, schedule.phase1), (2u8, schedule.phase2)] {
        if phase.epochs == 0 {
            continue;
        }
        let frozen = if phase_idx == 2 {
            frozen_ranges(&net, schedule.phase2_trainable_blocks)
        } else {
            Vec::new()
        };
        let mut adam = Adam::new(net.param_count());
        let mut best: Option<(f64, Vec<f32>)> = None;
        for epoch in 1..=phase.epochs {
            let epoch_key = (u64::from(phase_idx) << 32) | epoch as u64;
            let mut shuffle_rng = rng_for(seed, "shuffle", epoch_key);
            let mut dropout_rng = rng_for(seed, "dropout", epoch_key);
            order.sort_unstable();
            order.shuffle(&mut shuffle_rng);
            let mut loss_sum = 0.0;
            for batch in order.chunks(phase.batch_size) {
                xb.clear();
                yb.clear();
                for &i in batch {
                    xb.extend_from_slice(&x_train[i * per..(i + 1) * per]);
                    yb.push(y_train[i]);
                }
                let (loss, grads) = net.loss_and_grads(&xb, &yb, Some(&mut dropout_rng))?;
                if !loss.is_finite() {
                    return Err(Error::Degenerate(format!(
                        "training loss diverged in phase {phase_idx}, epoch {epoch}"
                    )));
                }
                loss_sum += f64::from(loss) * batch.len() as f64;
                adam.step(&mut net.params, &grads, phase.learning_rate, &frozen);
            }
            let val_acc = accuracy(&net, &x_val, &y_val)?;
            log.push(EpochRecord {
                phase: phase_idx,
                epoch,
                train_loss: loss_sum / y_train.len() as f64,
                val_acc,
            });
            log::debug!("phase {phase_idx} epoch {epoch}: val_acc {val_acc:.4}");
            if best.as_ref().is_none_or(|(b, _)| val_acc > *b) {
                best = Some((val_acc, net.params.clone()));
            }
        }
        if let Some((acc, params)) = best {
            net.params = params;
            best_overall = acc;
        }
    }
    Ok(TrainedNetwork {
        network: net,
        log,
        best_val_acc: best_overall,
        seed,
    })
}

pub fn write_epoch_log(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "{EPOCH_LOG_HEADER}").expect("write to vec");
    for r in log {
        writeln!(
            buf,
            "{},{},{:.6},{:.6}",
            r.phase, r.epoch, r.train_loss, r.val_acc
        )
        .expect("write to vec");
    }
    write_atomic(path, &buf)
}
