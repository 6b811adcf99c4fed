use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::network::{cross_entropy, Cache, NetConfig, Network};
use crate::error::Result;
use crate::seed::{derive_seed, rng_for};

/// Below this magnitude both gradients count as zero.
const ABS_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst relative error per parameter tensor.
    pub per_tensor: BTreeMap<String, f64>,
    pub checked: usize,
    /// Parameters whose perturbation flipped a ReLU, making the central
    /// difference straddle a kink.
    pub skipped_kinks: usize,
}

fn loss_and_pattern(
    net: &Network<f64>,
    x: &[f64],
    labels: &[u8],
    dropout_seed: u64,
) -> (f64, Vec<bool>) {
    let mut cache = Cache::default();
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let probs = net.forward_impl(x, labels.len(), Some(&mut rng), Some(&mut cache));
    let loss = cross_entropy(&probs, labels, net.config.classes) + net.l2_penalty();
    (loss, cache.relu_pattern())
}

/// Compare backpropagated gradients of a randomized float64 network against
/// central finite differences with the given step. Dropout is active with a
/// fixed mask so both sides see the same function.
pub fn gradient_check(
    config: &NetConfig,
    batch: usize,
    seed: u64,
    step: f64,
) -> Result<GradCheckReport> {
    let mut net = Network::<f64>::init(config.clone(), seed)?;
    let mut rng = rng_for(seed, "gradcheck", 0);
    for spec in net.layout().to_vec() {
        if !spec.is_weight {
            for b in &mut net.params[spec.range()] {
                *b = rng.gen_range(-0.1..0.1);
            }
        }
    }
    for c in 0..config.in_channels {
        net.input_shift[c] = rng.gen_range(-0.2..0.2);
        net.input_scale[c] = rng.gen_range(0.5..1.5);
    }
    let x: Vec<f64> = (0..batch * config.input_len())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let labels: Vec<u8> = (0..batch)
        .map(|_| rng.gen_range(1..=config.classes as u8))
        .collect();
    let dropout_seed = derive_seed(seed, "gradcheck-dropout", 0);

    let mut dropout_rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let (_, grads) = net.loss_and_grads(&x, &labels, Some(&mut dropout_rng))?;
    let (_, base_pattern) = loss_and_pattern(&net, &x, &labels, dropout_seed);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_tensor: BTreeMap::new(),
        checked: 0,
        skipped_kinks: 0,
    };
    for spec in net.layout().to_vec() {
        let mut worst: f64 = 0.0;
        for i in spec.range() {
            let orig = net.params[i];
            net.params[i] = orig + step;
            let (plus, p_plus) = loss_and_pattern(&net, &x, &labels, dropout_seed);
            net.params[i] = orig - step;
            let (minus, p_minus) = loss_and_pattern(&net, &x, &labels, dropout_seed);
            net.params[i] = orig;
            if p_plus != base_pattern || p_minus != base_pattern {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let analytic = grads[i];
            let scale = analytic.abs().max(numeric.abs());
            let err = if scale < ABS_FLOOR {
                0.0
            } else {
                (analytic - numeric).abs() / scale
            };
            worst = worst.max(err);
            report.checked += 1;
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_tensor.insert(spec.name.clone(), worst);
    }
    Ok(report)
}
