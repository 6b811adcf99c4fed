use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{NetConfig, Network};
use super::train::{train, TrainSchedule, TrainedNetwork};
use super::ProbVector;
use crate::error::{Error, Result};
use crate::patching::DatasetSplit;
use crate::seed::derive_seed;

#[derive(Debug, Clone)]
pub struct EnsembleModel {
    pub config: NetConfig,
    pub members: Vec<Network<f32>>,
    pub member_seeds: Vec<u64>,
}

/// Summary stored next to member checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct EnsembleIndex {
    pub config: NetConfig,
    pub member_seeds: Vec<u64>,
    pub member_files: Vec<String>,
}

impl EnsembleModel {
    pub fn new(members: Vec<Network<f32>>, member_seeds: Vec<u64>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::invalid("ensemble has no members"))?;
        let config = first.config.clone();
        if members.iter().any(|m| m.config != config) {
            return Err(Error::invalid(
                "ensemble members must share one network config",
            ));
        }
        if member_seeds.len() != members.len() {
            return Err(Error::invalid("one seed per ensemble member required"));
        }
        Ok(EnsembleModel {
            config,
            members,
            member_seeds,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Train `size` members with seeds derived from `seed`, on a pool of `jobs`
/// workers. Member results do not depend on `jobs`.
pub fn train_ensemble(
    config: &NetConfig,
    split: &DatasetSplit,
    schedule: &TrainSchedule,
    size: usize,
    seed: u64,
    jobs: usize,
) -> Result<(EnsembleModel, Vec<TrainedNetwork>)> {
    if size == 0 {
        return Err(Error::invalid("ensemble size must be >= 1"));
    }
    config.validate()?;
    schedule.validate()?;
    let seeds: Vec<u64> = (0..size as u64)
        .map(|i| derive_seed(seed, "member", i))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("cannot build worker pool: {e}")))?;
    let trained: Vec<TrainedNetwork> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&s| {
                let net = Network::init(config.clone(), s)?;
                train(net, split, schedule, s)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let members = trained.iter().map(|t| t.network.clone()).collect();
    Ok((EnsembleModel::new(members, seeds)?, trained))
}

/// Mean of the members' eval-mode probability vectors, one per input patch.
pub fn ensemble_predict(
    ensemble: &EnsembleModel,
    x: &[f32],
    batch: usize,
) -> Result<Vec<ProbVector>> {
    if ensemble.members.is_empty() {
        return Err(Error::invalid("ensemble has no members"));
    }
    let per_member: Vec<Vec<ProbVector>> = ensemble
        .members
        .par_iter()
        .map(|m| m.predict(x, batch))
        .collect::<Result<_>>()?;
    Ok((0..batch)
        .map(|i| {
            let column: Vec<ProbVector> = per_member.iter().map(|m| m[i]).collect();
            ProbVector::mean(&column).expect("non-empty ensemble")
        })
        .collect())
}
