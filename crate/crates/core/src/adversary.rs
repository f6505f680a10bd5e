//! Label-flipping adversaries.
//!
//! Malicious participants attack in two coordinated ways: as workers they
//! train on a label-permuted view of their shard, and as validators they
//! score every worker's model against that same permuted view, rewarding
//! fellow attackers and penalizing honest training. Flipping is pure view
//! logic — the underlying dataset is never mutated — and the committee is
//! protected by a hard cap on the malicious fraction of any round's
//! validator set, enforced by swapping excess malicious validators with
//! honest workers after election so the stake-weighted election statistics
//! stay untouched.

use crate::chain::RoleAssignment;
use crate::data::{DataShard, Dataset};
use crate::error::{Result, SimError};
use crate::models::{eval_loss, local_sgd, Minibatch, ModelSpec, ParamVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Static attack description, fixed for a whole run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub malicious_ids: BTreeSet<usize>,
    /// Label permutation: class l reports as flip_map[l].
    pub flip_map: Vec<usize>,
    pub validators_can_be_malicious: bool,
    /// Cap on the malicious share of any validator committee, at most 0.5.
    pub max_malicious_validator_fraction: f64,
}

impl AttackConfig {
    pub fn new(
        malicious_ids: BTreeSet<usize>,
        flip_map: Vec<usize>,
        validators_can_be_malicious: bool,
        max_malicious_validator_fraction: f64,
    ) -> Result<Self> {
        let cfg = AttackConfig {
            malicious_ids,
            flip_map,
            validators_can_be_malicious,
            max_malicious_validator_fraction,
        };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        let c = self.flip_map.len();
        let mut seen = vec![false; c];
        for &to in &self.flip_map {
            if to >= c || seen[to] {
                return Err(SimError::Config(format!(
                    "flip_map {:?} is not a permutation of 0..{c}",
                    self.flip_map
                )));
            }
            seen[to] = true;
        }
        if !(0.0..=0.5).contains(&self.max_malicious_validator_fraction) {
            return Err(SimError::Config(format!(
                "max_malicious_validator_fraction must lie in [0, 0.5], got {}",
                self.max_malicious_validator_fraction
            )));
        }
        Ok(())
    }

    /// The conventional flip l -> C-1-l over `classes` labels.
    pub fn reversal_flip_map(classes: usize) -> Vec<usize> {
        (0..classes).rev().collect()
    }

    pub fn is_malicious(&self, id: usize) -> bool {
        self.malicious_ids.contains(&id)
    }

    /// Committee cap for a validator set of size `v`.
    pub fn validator_cap(&self, v: usize) -> usize {
        if self.validators_can_be_malicious {
            (v as f64 * self.max_malicious_validator_fraction).floor() as usize
        } else {
            0
        }
    }
}

/// Materialize a shard with labels passed through `flip_map`. The dataset is
/// only read; an identity map returns the honest view unchanged.
pub fn flip_labels(
    shard: &DataShard,
    data: &Dataset,
    flip_map: &[usize],
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let (features, labels) = shard.materialize(data);
    let flipped = labels
        .iter()
        .map(|&y| {
            flip_map.get(y).copied().ok_or_else(|| {
                SimError::Config(format!("label {y} outside flip_map domain 0..{}", flip_map.len()))
            })
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok((features, flipped))
}

/// A malicious worker's round contribution: ordinary local SGD, but on the
/// flipped-label view of its shard.
#[allow(clippy::too_many_arguments)]
pub fn malicious_worker_update(
    spec: &ModelSpec,
    w0: &ParamVector,
    shard: &DataShard,
    data: &Dataset,
    flip_map: &[usize],
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<ParamVector> {
    let (features, labels) = flip_labels(shard, data, flip_map)?;
    local_sgd(spec, w0, &features, &labels, epochs, lr, batch_size, seed)
}

/// A malicious validator's loss report: every worker's model evaluated on
/// the flipped-label view of the validator's own shard, in worker order.
pub fn malicious_validator_losses(
    spec: &ModelSpec,
    worker_weights: &[ParamVector],
    shard: &DataShard,
    data: &Dataset,
    flip_map: &[usize],
) -> Result<Vec<f64>> {
    let (features, labels) = flip_labels(shard, data, flip_map)?;
    let batch = Minibatch::new(&features, &labels)?;
    worker_weights.iter().map(|w| eval_loss(spec, w, &batch)).collect()
}

/// Enforce the committee cap: if more malicious validators were elected than
/// `cfg` allows, the excess (highest ids first kept out — the lowest-id
/// malicious validators stay seated) are swapped with honest workers chosen
/// by `rng`. Set sizes and the overall partition are preserved.
pub fn cap_malicious_validators<R: Rng>(
    roles: &RoleAssignment,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<RoleAssignment> {
    let cap = cfg.validator_cap(roles.validators.len());
    let seated: Vec<usize> =
        roles.validators.iter().copied().filter(|id| cfg.is_malicious(*id)).collect();
    if seated.len() <= cap {
        return Ok(roles.clone());
    }
    let excess: Vec<usize> = seated[cap..].to_vec();
    let mut honest_workers: Vec<usize> =
        roles.workers.iter().copied().filter(|id| !cfg.is_malicious(*id)).collect();
    if honest_workers.len() < excess.len() {
        return Err(SimError::Config(format!(
            "cannot seat {} excess malicious validators: only {} honest workers to swap",
            excess.len(),
            honest_workers.len()
        )));
    }
    let mut validators: Vec<usize> = roles.validators.clone();
    let mut workers: Vec<usize> = roles.workers.clone();
    for &out in &excess {
        let pick = rng.gen_range(0..honest_workers.len());
        let inbound = honest_workers.remove(pick);
        let vi = validators.iter().position(|&id| id == out).expect("excess id is seated");
        validators[vi] = inbound;
        let wi = workers.iter().position(|&id| id == inbound).expect("pick is a worker");
        workers[wi] = out;
    }
    validators.sort_unstable();
    workers.sort_unstable();
    RoleAssignment::new(roles.round, roles.miner, validators, workers)
}
