//! The round driver: election, local training, validation, aggregation,
//! block commitment, and the window-ratio stopping rule.
//!
//! A run is fully determined by its config and one master seed. Every random
//! decision — dataset, partition, weight init, SGD shuffles, elections, the
//! malicious-validator cap swap — draws from a domain-separated stream, so
//! replaying a run reproduces the chain hash for hash.

use crate::adversary::{malicious_validator_losses, malicious_worker_update, flip_labels};
use crate::aggregation::{AggregatorKind, LossMatrix, ScoreVector};
use crate::chain::{build_block, save_chain, Chain, Genesis, RoleAssignment, StakeLedger};
use crate::data::{generate_synthetic, partition, DataShard, Dataset, PartitionConfig, SyntheticConfig};
use crate::error::{Result, SimError};
use crate::models::{eval_accuracy, eval_loss, local_sgd, Minibatch, ModelSpec, ParamVector};
use crate::seeds::derive_subseed;
use crate::adversary::AttackConfig;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

/// Learning-rate schedule: fixed, or the harmonic decay the convergence
/// theory assumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { value: f64 },
    /// alpha_r = 1 / (offset + r), r starting at 1.
    Harmonic { offset: f64 },
}

impl LrSchedule {
    pub fn rate(&self, round: u64) -> f64 {
        match *self {
            LrSchedule::Constant { value } => value,
            LrSchedule::Harmonic { offset } => 1.0 / (offset + round as f64),
        }
    }

    fn check(&self) -> Result<()> {
        let ok = match *self {
            LrSchedule::Constant { value } => value.is_finite() && value > 0.0,
            LrSchedule::Harmonic { offset } => offset.is_finite() && offset >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(SimError::Config("learning-rate schedule must be positive".into()))
        }
    }
}

/// Synthetic dataset and partition parameters for one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_samples: usize,
    pub test_samples: usize,
    pub classes: usize,
    pub input_dim: usize,
    /// Pairwise distance between class centers (unit noise).
    pub separation: f64,
    /// Dirichlet concentration; ~0.1 is strongly non-IID.
    pub lambda: f64,
    pub min_shard: usize,
}

/// Which classifier the participants train.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Logistic,
    Mlp { hidden: usize },
}

/// Everything that defines an experiment except the master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub label: String,
    pub num_participants: usize,
    pub k: usize,
    pub v: usize,
    pub epochs: usize,
    pub lr: LrSchedule,
    pub batch_size: usize,
    /// Trailing window W for the stopping ratio.
    #[serde(default = "default_window")]
    pub stopping_window: usize,
    pub max_rounds: u64,
    pub aggregator: AggregatorKind,
    #[serde(default)]
    pub krum_f: usize,
    /// Master seeds; one full run per seed.
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub attack: Option<AttackConfig>,
}

fn default_window() -> usize {
    30
}

impl RunConfig {
    pub fn check(&self) -> Result<()> {
        if self.k + self.v + 1 != self.num_participants {
            return Err(SimError::Config(format!(
                "K + V + 1 = {} must equal num_participants = {}",
                self.k + self.v + 1,
                self.num_participants
            )));
        }
        if self.stopping_window < 2 {
            return Err(SimError::Config("stopping_window must be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(SimError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || self.max_rounds == 0 {
            return Err(SimError::Config("batch_size and max_rounds must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(SimError::Config("at least one master seed is required".into()));
        }
        self.lr.check()?;
        if self.aggregator == AggregatorKind::Krum && self.k < self.krum_f + 3 {
            return Err(SimError::Config(format!(
                "krum needs K >= f + 3; got K={}, f={}",
                self.k, self.krum_f
            )));
        }
        let d = &self.data;
        if d.train_samples == 0 || d.test_samples == 0 || d.classes < 2 || d.input_dim == 0 {
            return Err(SimError::Config("data config has empty dimensions".into()));
        }
        if d.classes > d.input_dim {
            return Err(SimError::Config(
                "orthogonal class centers need classes <= input_dim".into(),
            ));
        }
        if !(d.separation.is_finite() && d.separation > 0.0)
            || !(d.lambda.is_finite() && d.lambda > 0.0)
        {
            return Err(SimError::Config("separation and lambda must be positive".into()));
        }
        if d.min_shard == 0 || d.min_shard * self.num_participants > d.train_samples {
            return Err(SimError::Config(format!(
                "min_shard {} x {} participants exceeds {} training samples",
                d.min_shard, self.num_participants, d.train_samples
            )));
        }
        if let Some(a) = &self.attack {
            a.check()?;
            if a.flip_map.len() != d.classes {
                return Err(SimError::Config(format!(
                    "flip_map covers {} labels but the dataset has {} classes",
                    a.flip_map.len(),
                    d.classes
                )));
            }
            if let Some(&id) = a.malicious_ids.iter().find(|&&id| id >= self.num_participants) {
                return Err(SimError::Config(format!(
                    "malicious id {id} outside participant range 0..{}",
                    self.num_participants
                )));
            }
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        match self.model {
            ModelConfig::Logistic => ModelSpec::logistic(self.data.input_dim, self.data.classes),
            ModelConfig::Mlp { hidden } => {
                ModelSpec::mlp(self.data.input_dim, hidden, self.data.classes)
            }
        }
    }
}

/// Stopping rule: k_i = min/max of the trailing W accuracies once i >= W;
/// training stops the first time k_i strictly decreases, and the reported
/// accuracy is the best seen up to that round.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StoppingState {
    pub accuracies: Vec<f64>,
    pub k_values: Vec<f64>,
    pub stopped_at: Option<u64>,
    pub final_accuracy: Option<f64>,
}

impl StoppingState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stopped(&self) -> bool {
        self.stopped_at.is_some()
    }

    /// The latest window ratio, if the window has filled.
    pub fn latest_k(&self) -> Option<f64> {
        self.k_values.last().copied()
    }

    pub fn update(&mut self, accuracy: f64, window: usize) -> Result<()> {
        if self.stopped() {
            return Err(SimError::ProtocolFault(
                "stopping rule already fired; no further accuracies accepted".into(),
            ));
        }
        self.accuracies.push(accuracy);
        let i = self.accuracies.len();
        if i < window {
            return Ok(());
        }
        let tail = &self.accuracies[i - window..];
        let max = tail.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = tail.iter().copied().fold(f64::INFINITY, f64::min);
        // degenerate all-zero window: treat as a flat ratio of 1
        let k = if max == 0.0 { 1.0 } else { min / max };
        if let Some(&prev) = self.k_values.last() {
            if k < prev {
                self.stopped_at = Some(i as u64);
                self.final_accuracy =
                    Some(self.accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            }
        }
        self.k_values.push(k);
        Ok(())
    }

    /// Best accuracy seen so far (used when max_rounds ends the run first).
    pub fn best_accuracy(&self) -> Option<f64> {
        if self.accuracies.is_empty() {
            None
        } else {
            Some(self.accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        }
    }
}

/// Per-round metrics handed back by the driver.
#[derive(Debug, Clone)]
pub struct RoundReport {
    pub round: u64,
    pub roles: RoleAssignment,
    pub scores: ScoreVector,
    pub test_accuracy: f64,
    pub global_loss: f64,
    /// Seconds spent in the round; diagnostic only, never persisted.
    pub wall_time: f64,
}

/// Live state of one run: the materialized data, the shard map, and the
/// growing chain.
pub struct RunState {
    pub cfg: RunConfig,
    pub master_seed: u64,
    pub train: Dataset,
    pub test: Dataset,
    pub shards: Vec<DataShard>,
    pub chain: Chain,
}

impl RunState {
    pub fn global_weight(&self) -> &ParamVector {
        self.chain
            .blocks
            .last()
            .map(|b| &b.global_weight)
            .unwrap_or(&self.chain.genesis.initial_weight)
    }
}

/// Materialize a run: synthesize and split the dataset, partition the
/// training rows into shards, set stakes proportional to shard sizes, and
/// write the genesis record.
pub fn prepare_run(cfg: &RunConfig, master_seed: u64) -> Result<RunState> {
    cfg.check()?;
    let d = &cfg.data;
    let full = generate_synthetic(&SyntheticConfig {
        num_samples: d.train_samples + d.test_samples,
        num_classes: d.classes,
        input_dim: d.input_dim,
        separation: d.separation,
        seed: derive_subseed("run-data", &[master_seed]),
    })?;
    let (train, test) = full.split_at(d.train_samples)?;
    let shards = partition(
        &train,
        &PartitionConfig {
            num_shards: cfg.num_participants,
            lambda: d.lambda,
            min_shard: d.min_shard,
            seed: derive_subseed("run-partition", &[master_seed]),
        },
    )?;
    let stakes = StakeLedger::new(
        shards.iter().enumerate().map(|(id, s)| (id, s.indices.len() as f64)).collect(),
    )?;
    let shard_sizes: BTreeMap<usize, usize> =
        shards.iter().enumerate().map(|(id, s)| (id, s.indices.len())).collect();
    let model = cfg.model_spec();
    let w0 = model.init_weights(derive_subseed("run-init", &[master_seed]));
    let genesis = Genesis::new(
        stakes,
        cfg.k,
        cfg.v,
        cfg.aggregator,
        cfg.krum_f,
        model,
        shard_sizes,
        cfg.attack.clone(),
        w0,
    )?;
    Ok(RunState {
        cfg: cfg.clone(),
        master_seed,
        train,
        test,
        shards,
        chain: Chain::new(genesis),
    })
}

fn honest_validator_row(
    spec: &ModelSpec,
    worker_weights: &[ParamVector],
    shard: &DataShard,
    data: &Dataset,
) -> Result<Vec<f64>> {
    let (features, labels) = shard.materialize(data);
    let batch = Minibatch::new(&features, &labels)?;
    worker_weights.iter().map(|w| eval_loss(spec, w, &batch)).collect()
}

fn accuracy_row(
    spec: &ModelSpec,
    worker_weights: &[ParamVector],
    shard: &DataShard,
    data: &Dataset,
    flip: Option<&[usize]>,
) -> Result<Vec<f64>> {
    let (features, labels) = match flip {
        Some(map) => flip_labels(shard, data, map)?,
        None => shard.materialize(data),
    };
    let batch = Minibatch::new(&features, &labels)?;
    worker_weights.iter().map(|w| eval_accuracy(spec, w, &batch)).collect()
}

/// Execute one round on top of the current chain tip: elect the committee,
/// train the K workers (in parallel, merged in ascending-id order), collect
/// the V validators' loss rows, aggregate, and commit the block. On any
/// error the chain is left unchanged.
pub fn run_round(state: &mut RunState) -> Result<RoundReport> {
    let started = Instant::now();
    let cfg = &state.cfg;
    let round = state.chain.next_round();
    let prev = state.chain.tip_hash();
    let roles = state.chain.genesis.derive_roles(round, &prev)?;
    let spec = state.chain.genesis.model.clone();
    let spec = &spec;
    let lr = cfg.lr.rate(round);
    let w_prev = state.global_weight().clone();
    let attack = cfg.attack.as_ref();

    let trained: Vec<(usize, ParamVector)> = roles
        .workers
        .par_iter()
        .map(|&id| -> Result<(usize, ParamVector)> {
            let shard = &state.shards[id];
            let seed = derive_subseed("run-sgd", &[state.master_seed, round, id as u64]);
            let w = match attack {
                Some(a) if a.is_malicious(id) => malicious_worker_update(
                    spec,
                    &w_prev,
                    shard,
                    &state.train,
                    &a.flip_map,
                    cfg.epochs,
                    lr,
                    cfg.batch_size,
                    seed,
                )?,
                _ => {
                    let (features, labels) = shard.materialize(&state.train);
                    local_sgd(
                        spec,
                        &w_prev,
                        &features,
                        &labels,
                        cfg.epochs,
                        lr,
                        cfg.batch_size,
                        seed,
                    )?
                }
            };
            Ok((id, w))
        })
        .collect::<Result<_>>()?;
    let worker_weights: BTreeMap<usize, ParamVector> = trained.into_iter().collect();
    let ordered: Vec<ParamVector> = worker_weights.values().cloned().collect();

    let report_accuracy = cfg.aggregator == AggregatorKind::SoftmaxAccuracy;
    let rows: Vec<Vec<f64>> = roles
        .validators
        .par_iter()
        .map(|&vid| -> Result<Vec<f64>> {
            let shard = &state.shards[vid];
            let malicious = attack.map(|a| a.is_malicious(vid)).unwrap_or(false);
            if report_accuracy {
                let flip =
                    if malicious { attack.map(|a| a.flip_map.as_slice()) } else { None };
                accuracy_row(spec, &ordered, shard, &state.train, flip)
            } else if malicious {
                let a = attack.expect("malicious implies attack config");
                malicious_validator_losses(spec, &ordered, shard, &state.train, &a.flip_map)
            } else {
                honest_validator_row(spec, &ordered, shard, &state.train)
            }
        })
        .collect::<Result<_>>()?;
    let loss_matrix = LossMatrix::new(rows, roles.validators.clone(), roles.workers.clone())?;

    let block = build_block(
        round,
        prev,
        roles.clone(),
        worker_weights,
        loss_matrix,
        &state.chain.genesis.aggregator_context(),
    )?;
    let scores = block.scores.clone();
    let global = block.global_weight.clone();
    if !global.all_finite() {
        return Err(SimError::ProtocolFault(format!(
            "round {round} produced a non-finite global weight (diverged?)"
        )));
    }
    state.chain.append(block)?;

    let test_batch = Minibatch::new(&state.test.features, &state.test.labels)?;
    let test_accuracy = eval_accuracy(spec, &global, &test_batch)?;
    let global_loss = eval_loss(spec, &global, &test_batch)?;
    Ok(RoundReport {
        round,
        roles,
        scores,
        test_accuracy,
        global_loss,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

/// Result of a completed run, as written to `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub master_seed: u64,
    pub aggregator: AggregatorKind,
    pub num_participants: usize,
    pub k: usize,
    pub v: usize,
    pub malicious_count: usize,
    pub rounds_run: u64,
    pub stopped_at: Option<u64>,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub tip_hash: String,
}

/// One CSV row per round: `round,accuracy,loss,k_value` (k blank until the
/// stopping window fills).
fn write_rounds_csv(path: &Path, rows: &[(u64, f64, f64, Option<f64>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(SimError::from)?;
    w.write_record(["round", "accuracy", "loss", "k_value"]).map_err(SimError::from)?;
    for (round, acc, loss, k) in rows {
        let k_field = k.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([round.to_string(), acc.to_string(), loss.to_string(), k_field])
            .map_err(SimError::from)?;
    }
    w.flush()?;
    Ok(())
}

/// Drive a full run for one master seed: rounds until the stopping rule
/// fires or `max_rounds` is reached, then persist `chain.jsonl`,
/// `chain.weights`, `rounds.csv`, and `summary.json` under `out_dir`.
pub fn run_experiment(cfg: &RunConfig, master_seed: u64, out_dir: &Path) -> Result<RunSummary> {
    std::fs::create_dir_all(out_dir)?;
    let mut state = prepare_run(cfg, master_seed)?;
    let mut stopping = StoppingState::new();
    let mut rows: Vec<(u64, f64, f64, Option<f64>)> = Vec::new();
    let mut last_loss = f64::NAN;
    for _ in 0..cfg.max_rounds {
        let report = run_round(&mut state)?;
        stopping.update(report.test_accuracy, cfg.stopping_window)?;
        last_loss = report.global_loss;
        rows.push((report.round, report.test_accuracy, report.global_loss, stopping.latest_k()));
        if stopping.stopped() {
            break;
        }
    }
    save_chain(
        &state.chain,
        &out_dir.join("chain.jsonl"),
        &out_dir.join("chain.weights"),
    )?;
    write_rounds_csv(&out_dir.join("rounds.csv"), &rows)?;
    let summary = RunSummary {
        label: cfg.label.clone(),
        master_seed,
        aggregator: cfg.aggregator,
        num_participants: cfg.num_participants,
        k: cfg.k,
        v: cfg.v,
        malicious_count: cfg.attack.as_ref().map(|a| a.malicious_ids.len()).unwrap_or(0),
        rounds_run: state.chain.blocks.len() as u64,
        stopped_at: stopping.stopped_at,
        final_accuracy: stopping
            .final_accuracy
            .or_else(|| stopping.best_accuracy())
            .unwrap_or(0.0),
        final_loss: last_loss,
        tip_hash: crate::chain::hash_hex(&state.chain.tip_hash()),
    };
    let json = serde_json::to_string_pretty(&summary).map_err(SimError::from)?;
    std::fs::write(out_dir.join("summary.json"), json + "\n")?;
    Ok(summary)
}
