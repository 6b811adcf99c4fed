//! Small convolutional classifier trained from scratch, with ensembles.

mod adam;
mod checkpoint;
mod ensemble;
mod gradcheck;
mod network;
mod scalar;
mod train;

use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use checkpoint::{
    config_digest, decode_network, encode_network, load_ensemble, load_network, save_ensemble,
    save_network, CHECKPOINT_VERSION,
};
pub use ensemble::{ensemble_predict, train_ensemble, EnsembleModel};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use network::{param_layout, LayerKind, Mode, NetConfig, Network, TensorSpec};
pub use scalar::Scalar;
pub use train::{
    pack_patches, train, write_epoch_log, EpochRecord, Phase, TrainSchedule, TrainedNetwork,
    EPOCH_LOG_HEADER,
};

/// Attribution probabilities for artists 1..4.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(pub [f64; 4]);

impl ProbVector {
    pub const UNIFORM: ProbVector = ProbVector([0.25; 4]);

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    /// 1-based label of the most probable artist (lowest label on ties).
    pub fn argmax(&self) -> u8 {
        let mut best = 0;
        for i in 1..4 {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        best as u8 + 1
    }

    pub fn max(&self) -> f64 {
        self.0.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|&p| p >= 0.0 && p.is_finite()) && (self.sum() - 1.0).abs() <= 1e-6
    }

    pub fn mean(vectors: &[ProbVector]) -> Option<ProbVector> {
        if vectors.is_empty() {
            return None;
        }
        let mut out = [0.0; 4];
        for v in vectors {
            for (o, p) in out.iter_mut().zip(v.0) {
                *o += p;
            }
        }
        let n = vectors.len() as f64;
        Some(ProbVector(out.map(|s| s / n)))
    }
}

#[cfg(test)]
mod tests;
