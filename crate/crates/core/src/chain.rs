//! Stake ledger, role election, and the hash-linked block chain.
//!
//! Each round a miner and V validators are drawn stake-proportionally
//! without replacement from the participant set, seeded by the previous
//! block's hash and the round number, so any verifier can re-derive the
//! committee. The miner's block stores everything needed to re-run the
//! round's bookkeeping — worker weights, the validators' loss matrix, the
//! derived score vector, and the aggregated global model — and validation
//! literally recomputes those fields and compares bit patterns.
//!
//! Hashes are SHA-256 over a canonical serialization: fields in declaration
//! order, integers as big-endian u64, reals as big-endian IEEE-754 binary64
//! bit patterns, and maps sorted by id. Chains persist as a JSON-lines file
//! (genesis header plus one block per line; 32-byte fields base64) with a
//! binary sidecar holding every weight vector bit-exactly; the loader
//! insists each line re-serializes to the identical bytes, so a chain file
//! is valid only in canonical form.

use crate::adversary::{cap_malicious_validators, AttackConfig};
use crate::aggregation::{
    aggregate_krum, aggregate_median, aggregate_simple, aggregate_softmax,
    aggregate_softmax_accuracy, aggregate_vanilla, mean_loss, softmax_scores, AggregatorKind,
    LossMatrix, ScoreVector,
};
use crate::error::{Result, SimError};
use crate::models::{ModelSpec, ParamVector, ShapeTag};
use crate::seeds::{derive_seed_from_bytes, rng_from_bytes};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().into()
}

pub fn hash_hex(h: &[u8; 32]) -> String {
    let mut s = String::with_capacity(64);
    for b in h {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Positive stake per participant id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StakeLedger {
    stakes: BTreeMap<usize, f64>,
}

impl StakeLedger {
    pub fn new(stakes: BTreeMap<usize, f64>) -> Result<Self> {
        if stakes.is_empty() {
            return Err(SimError::Config("stake ledger is empty".into()));
        }
        for (&id, &s) in &stakes {
            if !(s.is_finite() && s > 0.0) {
                return Err(SimError::Config(format!(
                    "participant {id} has non-positive stake {s}"
                )));
            }
        }
        Ok(StakeLedger { stakes })
    }

    pub fn len(&self) -> usize {
        self.stakes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stakes.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.stakes.keys().copied()
    }

    pub fn stake(&self, id: usize) -> Option<f64> {
        self.stakes.get(&id).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.stakes.iter().map(|(&id, &s)| (id, s))
    }
}

/// One round's committee: a single miner, V validators, K workers, jointly
/// a partition of the participant universe. Id lists are kept ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleAssignment {
    pub round: u64,
    pub miner: usize,
    pub validators: Vec<usize>,
    pub workers: Vec<usize>,
}

impl RoleAssignment {
    pub fn new(
        round: u64,
        miner: usize,
        validators: Vec<usize>,
        workers: Vec<usize>,
    ) -> Result<Self> {
        let ascending =
            |ids: &[usize]| ids.windows(2).all(|w| w[0] < w[1]);
        if validators.is_empty() || workers.is_empty() {
            return Err(SimError::ProtocolFault(
                "role assignment needs at least one validator and one worker".into(),
            ));
        }
        if !ascending(&validators) || !ascending(&workers) {
            return Err(SimError::ProtocolFault("role id lists must be ascending".into()));
        }
        let overlap = validators.iter().any(|v| workers.binary_search(v).is_ok())
            || validators.binary_search(&miner).is_ok()
            || workers.binary_search(&miner).is_ok();
        if overlap {
            return Err(SimError::ProtocolFault("roles must be disjoint".into()));
        }
        Ok(RoleAssignment { round, miner, validators, workers })
    }
}

/// Context the aggregation step needs beyond the weights and losses.
#[derive(Debug, Clone, Copy)]
pub struct AggregatorContext<'a> {
    pub kind: AggregatorKind,
    pub krum_f: usize,
    /// Participant id -> local sample count (FedAvg weighting).
    pub shard_sizes: &'a BTreeMap<usize, usize>,
}

/// Round-zero state: everything a verifier needs to replay the chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Genesis {
    pub stakes: StakeLedger,
    pub k: usize,
    pub v: usize,
    pub aggregator: AggregatorKind,
    pub krum_f: usize,
    pub model: ModelSpec,
    pub shard_sizes: BTreeMap<usize, usize>,
    pub attack: Option<AttackConfig>,
    pub initial_weight: ParamVector,
}

impl Genesis {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        stakes: StakeLedger,
        k: usize,
        v: usize,
        aggregator: AggregatorKind,
        krum_f: usize,
        model: ModelSpec,
        shard_sizes: BTreeMap<usize, usize>,
        attack: Option<AttackConfig>,
        initial_weight: ParamVector,
    ) -> Result<Self> {
        if stakes.len() != k + v + 1 {
            return Err(SimError::Config(format!(
                "{} participants cannot fill K={k} workers, V={v} validators and one miner",
                stakes.len()
            )));
        }
        if aggregator == AggregatorKind::Krum && k < krum_f + 3 {
            return Err(SimError::Config(format!(
                "krum needs K >= f + 3; got K={k}, f={krum_f}"
            )));
        }
        if initial_weight.shape_tag != model.shape {
            return Err(SimError::Config("initial weight shape differs from model".into()));
        }
        for id in shard_sizes.keys() {
            if stakes.stake(*id).is_none() {
                return Err(SimError::Config(format!("shard size for unknown participant {id}")));
            }
        }
        if let Some(a) = &attack {
            a.check()?;
        }
        Ok(Genesis {
            stakes,
            k,
            v,
            aggregator,
            krum_f,
            model,
            shard_sizes,
            attack,
            initial_weight,
        })
    }

    pub fn hash(&self) -> [u8; 32] {
        let mut buf = Vec::new();
        canon_u64(&mut buf, self.stakes.len() as u64);
        for (id, s) in self.stakes.entries() {
            canon_u64(&mut buf, id as u64);
            canon_f64(&mut buf, s);
        }
        canon_u64(&mut buf, self.k as u64);
        canon_u64(&mut buf, self.v as u64);
        buf.push(aggregator_index(self.aggregator));
        canon_u64(&mut buf, self.krum_f as u64);
        canon_model(&mut buf, &self.model);
        canon_u64(&mut buf, self.shard_sizes.len() as u64);
        for (&id, &n) in &self.shard_sizes {
            canon_u64(&mut buf, id as u64);
            canon_u64(&mut buf, n as u64);
        }
        match &self.attack {
            None => buf.push(0),
            Some(a) => {
                buf.push(1);
                canon_u64(&mut buf, a.malicious_ids.len() as u64);
                for &id in &a.malicious_ids {
                    canon_u64(&mut buf, id as u64);
                }
                canon_u64(&mut buf, a.flip_map.len() as u64);
                for &l in &a.flip_map {
                    canon_u64(&mut buf, l as u64);
                }
                buf.push(a.validators_can_be_malicious as u8);
                canon_f64(&mut buf, a.max_malicious_validator_fraction);
            }
        }
        canon_param(&mut buf, &self.initial_weight);
        sha256(&buf)
    }

    pub fn aggregator_context(&self) -> AggregatorContext<'_> {
        AggregatorContext {
            kind: self.aggregator,
            krum_f: self.krum_f,
            shard_sizes: &self.shard_sizes,
        }
    }

    /// The committee for `round`, exactly as the protocol derives it:
    /// stake-weighted election followed by the malicious-validator cap swap
    /// when an attack is configured. Pure in (self, round, prev_hash).
    pub fn derive_roles(&self, round: u64, prev_hash: &[u8; 32]) -> Result<RoleAssignment> {
        let elected = elect_roles(&self.stakes, round, prev_hash, self.k, self.v)?;
        match &self.attack {
            None => Ok(elected),
            Some(cfg) => {
                let mut rng = capswap_rng(prev_hash, round);
                cap_malicious_validators(&elected, cfg, &mut rng)
            }
        }
    }
}

/// One committed round.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub round: u64,
    pub prev_hash: [u8; 32],
    pub role_seed: [u8; 8],
    pub roles: RoleAssignment,
    pub worker_weights: BTreeMap<usize, ParamVector>,
    pub loss_matrix: LossMatrix,
    pub scores: ScoreVector,
    pub global_weight: ParamVector,
    pub block_hash: [u8; 32],
}

impl Block {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        canon_u64(&mut buf, self.round);
        buf.extend_from_slice(&self.prev_hash);
        buf.extend_from_slice(&self.role_seed);
        canon_u64(&mut buf, self.roles.round);
        canon_u64(&mut buf, self.roles.miner as u64);
        canon_ids(&mut buf, &self.roles.validators);
        canon_ids(&mut buf, &self.roles.workers);
        canon_u64(&mut buf, self.worker_weights.len() as u64);
        for (&id, w) in &self.worker_weights {
            canon_u64(&mut buf, id as u64);
            canon_param(&mut buf, w);
        }
        canon_ids(&mut buf, &self.loss_matrix.validator_ids);
        canon_ids(&mut buf, &self.loss_matrix.worker_ids);
        for row in &self.loss_matrix.entries {
            for &x in row {
                canon_f64(&mut buf, x);
            }
        }
        canon_u64(&mut buf, self.scores.scores.len() as u64);
        for &s in &self.scores.scores {
            canon_f64(&mut buf, s);
        }
        canon_param(&mut buf, &self.global_weight);
        buf
    }

    pub fn compute_hash(&self) -> [u8; 32] {
        sha256(&self.canonical_bytes())
    }
}

/// The chain: a genesis record and its committed blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub genesis: Genesis,
    pub genesis_hash: [u8; 32],
    pub blocks: Vec<Block>,
}

impl Chain {
    pub fn new(genesis: Genesis) -> Self {
        let genesis_hash = genesis.hash();
        Chain { genesis, genesis_hash, blocks: Vec::new() }
    }

    pub fn tip_hash(&self) -> [u8; 32] {
        self.blocks.last().map(|b| b.block_hash).unwrap_or(self.genesis_hash)
    }

    pub fn next_round(&self) -> u64 {
        self.blocks.last().map(|b| b.round + 1).unwrap_or(1)
    }

    /// Append a block, enforcing linkage and round sequence.
    pub fn append(&mut self, block: Block) -> Result<()> {
        if block.prev_hash != self.tip_hash() {
            return Err(SimError::ProtocolFault(format!(
                "block {} does not link to the chain tip",
                block.round
            )));
        }
        if block.round != self.next_round() {
            return Err(SimError::ProtocolFault(format!(
                "expected round {}, got {}",
                self.next_round(),
                block.round
            )));
        }
        self.blocks.push(block);
        Ok(())
    }
}

// --- canonical encoding -------------------------------------------------------

fn canon_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_be_bytes());
}

fn canon_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_bits().to_be_bytes());
}

fn canon_ids(buf: &mut Vec<u8>, ids: &[usize]) {
    canon_u64(buf, ids.len() as u64);
    for &id in ids {
        canon_u64(buf, id as u64);
    }
}

fn canon_shape(buf: &mut Vec<u8>, tag: ShapeTag) {
    match tag {
        ShapeTag::Quadratic { dim } => {
            buf.push(0);
            canon_u64(buf, dim as u64);
        }
        ShapeTag::Logistic { input_dim, classes } => {
            buf.push(1);
            canon_u64(buf, input_dim as u64);
            canon_u64(buf, classes as u64);
        }
        ShapeTag::Mlp { input_dim, hidden, classes } => {
            buf.push(2);
            canon_u64(buf, input_dim as u64);
            canon_u64(buf, hidden as u64);
            canon_u64(buf, classes as u64);
        }
    }
}

fn canon_param(buf: &mut Vec<u8>, w: &ParamVector) {
    canon_shape(buf, w.shape_tag);
    canon_u64(buf, w.values.len() as u64);
    for &x in &w.values {
        canon_f64(buf, x);
    }
}

fn canon_model(buf: &mut Vec<u8>, m: &ModelSpec) {
    canon_shape(buf, m.shape);
    canon_u64(buf, m.quadratic_target.len() as u64);
    for &x in &m.quadratic_target {
        canon_f64(buf, x);
    }
}

fn aggregator_index(kind: AggregatorKind) -> u8 {
    AggregatorKind::ALL.iter().position(|k| *k == kind).unwrap() as u8
}

// --- election ------------------------------------------------------------------

fn election_context(prev_hash: &[u8; 32], round: u64) -> Vec<u8> {
    let mut ctx = Vec::with_capacity(40);
    ctx.extend_from_slice(prev_hash);
    ctx.extend_from_slice(&round.to_be_bytes());
    ctx
}

/// 32-byte election seed for (prev_hash, round); its first 8 bytes are the
/// block's role_seed field.
pub fn election_seed(prev_hash: &[u8; 32], round: u64) -> [u8; 32] {
    derive_seed_from_bytes("election", &election_context(prev_hash, round))
}

/// RNG stream for the malicious-validator cap swap of (prev_hash, round).
pub fn capswap_rng(prev_hash: &[u8; 32], round: u64) -> ChaCha20Rng {
    rng_from_bytes("capswap", &election_context(prev_hash, round))
}

fn weighted_draw<R: Rng>(pool: &mut Vec<(usize, f64)>, rng: &mut R) -> usize {
    let total: f64 = pool.iter().map(|(_, s)| *s).sum();
    let u = rng.gen_range(0.0..total);
    let mut acc = 0.0;
    for i in 0..pool.len() {
        acc += pool[i].1;
        if u < acc {
            return pool.remove(i).0;
        }
    }
    // floating-point edge: u landed on the far boundary
    pool.pop().expect("pool checked non-empty").0
}

/// Elect the round's committee: the miner, then V validators, drawn
/// sequentially without replacement with probability proportional to stake
/// from a ChaCha20 stream seeded by (prev_hash, round); everyone left is a
/// worker. Any verifier with the ledger re-derives the same assignment.
pub fn elect_roles(
    ledger: &StakeLedger,
    round: u64,
    prev_hash: &[u8; 32],
    k: usize,
    v: usize,
) -> Result<RoleAssignment> {
    if ledger.len() < k + v + 1 {
        return Err(SimError::Config(format!(
            "{} participants are too few for K={k}, V={v} and one miner",
            ledger.len()
        )));
    }
    if ledger.len() != k + v + 1 {
        return Err(SimError::Config(format!(
            "roles must partition all {} participants; K={k} + V={v} + 1 falls short",
            ledger.len()
        )));
    }
    let mut rng = ChaCha20Rng::from_seed(election_seed(prev_hash, round));
    let mut pool: Vec<(usize, f64)> = ledger.entries().collect();
    let miner = weighted_draw(&mut pool, &mut rng);
    let mut validators: Vec<usize> = (0..v).map(|_| weighted_draw(&mut pool, &mut rng)).collect();
    validators.sort_unstable();
    let workers: Vec<usize> = pool.into_iter().map(|(id, _)| id).collect();
    RoleAssignment::new(round, miner, validators, workers)
}

// --- block construction and validation ------------------------------------------

fn ordered_weights(weights: &BTreeMap<usize, ParamVector>) -> Vec<ParamVector> {
    weights.values().cloned().collect()
}

/// Scores and global weight for a round, per the configured aggregation rule.
/// The score vector is always the softmax probability vector (the accuracy
/// variant uses its positive-sign twin) — it drives rewards even when the
/// global model comes from a baseline aggregator.
fn compute_scores_and_global(
    weights: &[ParamVector],
    l: &LossMatrix,
    ctx: &AggregatorContext,
) -> Result<(ScoreVector, ParamVector)> {
    match ctx.kind {
        AggregatorKind::Softmax => {
            let (g, s) = aggregate_softmax(weights, l)?;
            Ok((s, g))
        }
        AggregatorKind::SoftmaxAccuracy => {
            let (g, s) = aggregate_softmax_accuracy(weights, l)?;
            Ok((s, g))
        }
        AggregatorKind::Vanilla => {
            let s = softmax_scores(&mean_loss(l))?;
            let sizes = l
                .worker_ids
                .iter()
                .map(|id| {
                    ctx.shard_sizes.get(id).copied().ok_or_else(|| {
                        SimError::Config(format!("no shard size recorded for worker {id}"))
                    })
                })
                .collect::<Result<Vec<usize>>>()?;
            Ok((s, aggregate_vanilla(weights, &sizes)?))
        }
        AggregatorKind::Simple => {
            Ok((softmax_scores(&mean_loss(l))?, aggregate_simple(weights)?))
        }
        AggregatorKind::Median => {
            Ok((softmax_scores(&mean_loss(l))?, aggregate_median(weights)?))
        }
        AggregatorKind::Krum => {
            let s = softmax_scores(&mean_loss(l))?;
            let (g, _) = aggregate_krum(weights, ctx.krum_f)?;
            Ok((s, g))
        }
    }
}

fn check_block_structure(
    round: u64,
    roles: &RoleAssignment,
    worker_weights: &BTreeMap<usize, ParamVector>,
    l: &LossMatrix,
) -> Result<()> {
    if roles.round != round {
        return Err(SimError::ProtocolFault(format!(
            "roles carry round {}, block is round {round}",
            roles.round
        )));
    }
    if l.validator_ids != roles.validators {
        return Err(SimError::ProtocolFault(
            "loss matrix validators differ from the committee".into(),
        ));
    }
    if l.worker_ids != roles.workers {
        return Err(SimError::ProtocolFault(
            "loss matrix workers differ from the committee".into(),
        ));
    }
    let weight_ids: Vec<usize> = worker_weights.keys().copied().collect();
    if weight_ids != roles.workers {
        return Err(SimError::ProtocolFault(
            "worker weight map does not cover exactly the worker set".into(),
        ));
    }
    Ok(())
}

/// Assemble and hash a block from the round's raw material, filling scores
/// and global_weight via the aggregation rules.
pub fn build_block(
    round: u64,
    prev_hash: [u8; 32],
    roles: RoleAssignment,
    worker_weights: BTreeMap<usize, ParamVector>,
    loss_matrix: LossMatrix,
    ctx: &AggregatorContext,
) -> Result<Block> {
    check_block_structure(round, &roles, &worker_weights, &loss_matrix)?;
    let weights = ordered_weights(&worker_weights);
    let (scores, global_weight) = compute_scores_and_global(&weights, &loss_matrix, ctx)?;
    let seed = election_seed(&prev_hash, round);
    let mut role_seed = [0u8; 8];
    role_seed.copy_from_slice(&seed[..8]);
    let mut block = Block {
        round,
        prev_hash,
        role_seed,
        roles,
        worker_weights,
        loss_matrix,
        scores,
        global_weight,
        block_hash: [0u8; 32],
    };
    block.block_hash = block.compute_hash();
    Ok(block)
}

/// Why a block or chain failed validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultCode {
    Linkage,
    RoleSeed,
    RolesMismatch,
    Sequence,
    Structure,
    ScoresMismatch,
    AggregationMismatch,
    HashMismatch,
}

impl std::fmt::Display for FaultCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FaultCode::Linkage => "linkage",
            FaultCode::RoleSeed => "role-seed",
            FaultCode::RolesMismatch => "roles-mismatch",
            FaultCode::Sequence => "sequence",
            FaultCode::Structure => "structure",
            FaultCode::ScoresMismatch => "scores-mismatch",
            FaultCode::AggregationMismatch => "aggregation-mismatch",
            FaultCode::HashMismatch => "hash-mismatch",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fault {
    pub round: u64,
    pub code: FaultCode,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValidationResult {
    Valid,
    Invalid(Fault),
}

impl ValidationResult {
    pub fn is_valid(&self) -> bool {
        matches!(self, ValidationResult::Valid)
    }

    pub fn fault(&self) -> Option<&Fault> {
        match self {
            ValidationResult::Valid => None,
            ValidationResult::Invalid(f) => Some(f),
        }
    }

    fn invalid(round: u64, code: FaultCode, detail: impl Into<String>) -> Self {
        ValidationResult::Invalid(Fault { round, code, detail: detail.into() })
    }
}

impl std::fmt::Display for ValidationResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ValidationResult::Valid => f.write_str("valid"),
            ValidationResult::Invalid(fault) => write!(
                f,
                "invalid at round {}: {} ({})",
                fault.round, fault.code, fault.detail
            ),
        }
    }
}

fn bits_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Re-run a block's bookkeeping and compare bit patterns: linkage, role
/// seed, internal structure, scores, aggregation, and finally the hash.
pub fn validate_block(
    block: &Block,
    prev_hash: &[u8; 32],
    ctx: &AggregatorContext,
) -> ValidationResult {
    let r = block.round;
    if block.prev_hash != *prev_hash {
        return ValidationResult::invalid(r, FaultCode::Linkage, "prev_hash does not match");
    }
    let seed = election_seed(prev_hash, r);
    if block.role_seed != seed[..8] {
        return ValidationResult::invalid(
            r,
            FaultCode::RoleSeed,
            "role seed is not derived from (prev_hash, round)",
        );
    }
    if let Err(e) =
        check_block_structure(r, &block.roles, &block.worker_weights, &block.loss_matrix)
    {
        return ValidationResult::invalid(r, FaultCode::Structure, e.to_string());
    }
    let weights = ordered_weights(&block.worker_weights);
    let (scores, global) = match compute_scores_and_global(&weights, &block.loss_matrix, ctx) {
        Ok(x) => x,
        Err(e) => return ValidationResult::invalid(r, FaultCode::Structure, e.to_string()),
    };
    if !bits_eq(&scores.scores, &block.scores.scores) {
        return ValidationResult::invalid(
            r,
            FaultCode::ScoresMismatch,
            "recomputed scores differ",
        );
    }
    if block.global_weight.shape_tag != global.shape_tag
        || !bits_eq(&global.values, &block.global_weight.values)
    {
        return ValidationResult::invalid(
            r,
            FaultCode::AggregationMismatch,
            "recomputed global weight differs",
        );
    }
    if block.compute_hash() != block.block_hash {
        return ValidationResult::invalid(r, FaultCode::HashMismatch, "stored hash is wrong");
    }
    ValidationResult::Valid
}

/// Validate every block in order: linkage and round sequence, committee
/// re-derivation from the genesis ledger (including the attack cap swap),
/// then the full per-block recomputation.
pub fn validate_chain(chain: &Chain) -> ValidationResult {
    if chain.genesis.hash() != chain.genesis_hash {
        return ValidationResult::invalid(0, FaultCode::HashMismatch, "genesis hash is wrong");
    }
    let ctx = chain.genesis.aggregator_context();
    let mut prev = chain.genesis_hash;
    let mut expected_round = 1u64;
    for block in &chain.blocks {
        if block.round != expected_round {
            return ValidationResult::invalid(
                block.round,
                FaultCode::Sequence,
                format!("expected round {expected_round}"),
            );
        }
        match chain.genesis.derive_roles(block.round, &prev) {
            Ok(expected) => {
                if expected != block.roles {
                    return ValidationResult::invalid(
                        block.round,
                        FaultCode::RolesMismatch,
                        "committee differs from stake-based re-derivation",
                    );
                }
            }
            Err(e) => {
                return ValidationResult::invalid(
                    block.round,
                    FaultCode::Structure,
                    e.to_string(),
                )
            }
        }
        if block.worker_weights.values().any(|w| w.shape_tag != chain.genesis.model.shape) {
            return ValidationResult::invalid(
                block.round,
                FaultCode::Structure,
                "worker weights do not match the genesis model shape",
            );
        }
        let r = validate_block(block, &prev, &ctx);
        if !r.is_valid() {
            return r;
        }
        prev = block.block_hash;
        expected_round += 1;
    }
    ValidationResult::Valid
}

// --- rewards --------------------------------------------------------------------

/// Pool sizes for the per-round reward split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardParams {
    /// Total paid to the validator committee each round.
    pub validator_pool: f64,
    /// Fixed payment to the round's miner.
    pub miner_share: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams { validator_pool: 1.0, miner_share: 1.0 }
    }
}

/// Per-round reward shares. Worker i earns its score p_i (the worker pool is
/// exactly the score mass, 1). Validator j earns a slice of the validator
/// pool proportional to 1 / (dev_j + 1e-12), where dev_j is the mean
/// absolute deviation of j's loss reports from the committee means — agree
/// with the committee, earn more. The miner's share is fixed.
pub fn compute_round_rewards(block: &Block, params: &RewardParams) -> BTreeMap<usize, f64> {
    let mut rewards = BTreeMap::new();
    for (i, &id) in block.loss_matrix.worker_ids.iter().enumerate() {
        rewards.insert(id, block.scores.scores[i]);
    }
    let means = mean_loss(&block.loss_matrix);
    let k = means.len() as f64;
    let inv: Vec<f64> = block
        .loss_matrix
        .entries
        .iter()
        .map(|row| {
            let dev: f64 =
                row.iter().zip(means.iter()).map(|(x, m)| (x - m).abs()).sum::<f64>() / k;
            1.0 / (dev + 1e-12)
        })
        .collect();
    let total_inv: f64 = inv.iter().sum();
    for (j, &id) in block.loss_matrix.validator_ids.iter().enumerate() {
        rewards.insert(id, params.validator_pool * inv[j] / total_inv);
    }
    rewards.insert(block.roles.miner, params.miner_share);
    rewards
}

// --- persistence ------------------------------------------------------------------

const WEIGHTS_MAGIC: &[u8; 8] = b"FLWCHN01";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenesisRecord {
    stakes: BTreeMap<usize, f64>,
    k: usize,
    v: usize,
    aggregator: AggregatorKind,
    krum_f: usize,
    model: ModelSpec,
    shard_sizes: BTreeMap<usize, usize>,
    attack: Option<AttackConfig>,
    initial_weight_shape: ShapeTag,
    genesis_hash: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockRecord {
    round: u64,
    prev_hash: String,
    role_seed: String,
    miner: usize,
    validators: Vec<usize>,
    workers: Vec<usize>,
    losses: Vec<Vec<f64>>,
    scores: Vec<f64>,
    block_hash: String,
}

fn write_weight_values(out: &mut impl Write, w: &ParamVector) -> Result<()> {
    out.write_all(&(w.values.len() as u64).to_be_bytes())?;
    for &x in &w.values {
        out.write_all(&x.to_bits().to_be_bytes())?;
    }
    Ok(())
}

fn read_weight_values(inp: &mut impl Read, expected_len: usize) -> Result<Vec<f64>> {
    let mut len_buf = [0u8; 8];
    inp.read_exact(&mut len_buf)
        .map_err(|e| SimError::Validation(format!("weight sidecar truncated: {e}")))?;
    let len = u64::from_be_bytes(len_buf) as usize;
    if len != expected_len {
        return Err(SimError::Validation(format!(
            "weight vector length {len} does not match the model ({expected_len})"
        )));
    }
    let mut values = Vec::with_capacity(len);
    let mut bits = [0u8; 8];
    for _ in 0..len {
        inp.read_exact(&mut bits)
            .map_err(|e| SimError::Validation(format!("weight sidecar truncated: {e}")))?;
        values.push(f64::from_bits(u64::from_be_bytes(bits)));
    }
    Ok(values)
}

/// Persist a chain as `<jsonl>` (genesis header plus one block per line)
/// and `<weights>` (bit-exact weight vectors in chain order).
pub fn save_chain(chain: &Chain, jsonl_path: &Path, weights_path: &Path) -> Result<()> {
    let mut jsonl = BufWriter::new(File::create(jsonl_path)?);
    let mut weights = BufWriter::new(File::create(weights_path)?);
    weights.write_all(WEIGHTS_MAGIC)?;

    let g = &chain.genesis;
    let genesis_record = GenesisRecord {
        stakes: g.stakes.entries().collect(),
        k: g.k,
        v: g.v,
        aggregator: g.aggregator,
        krum_f: g.krum_f,
        model: g.model.clone(),
        shard_sizes: g.shard_sizes.clone(),
        attack: g.attack.clone(),
        initial_weight_shape: g.initial_weight.shape_tag,
        genesis_hash: B64.encode(chain.genesis_hash),
    };
    serde_json::to_writer(&mut jsonl, &genesis_record).map_err(SimError::from)?;
    jsonl.write_all(b"\n")?;
    write_weight_values(&mut weights, &g.initial_weight)?;

    for block in &chain.blocks {
        let record = BlockRecord {
            round: block.round,
            prev_hash: B64.encode(block.prev_hash),
            role_seed: B64.encode(block.role_seed),
            miner: block.roles.miner,
            validators: block.roles.validators.clone(),
            workers: block.roles.workers.clone(),
            losses: block.loss_matrix.entries.clone(),
            scores: block.scores.scores.clone(),
            block_hash: B64.encode(block.block_hash),
        };
        serde_json::to_writer(&mut jsonl, &record).map_err(SimError::from)?;
        jsonl.write_all(b"\n")?;
        for w in block.worker_weights.values() {
            write_weight_values(&mut weights, w)?;
        }
        write_weight_values(&mut weights, &block.global_weight)?;
    }
    jsonl.flush()?;
    weights.flush()?;
    Ok(())
}

fn decode_hash32(s: &str, what: &str) -> Result<[u8; 32]> {
    let bytes = B64
        .decode(s)
        .map_err(|e| SimError::Validation(format!("{what} is not valid base64: {e}")))?;
    let arr: [u8; 32] = bytes
        .try_into()
        .map_err(|_| SimError::Validation(format!("{what} is not 32 bytes")))?;
    Ok(arr)
}

fn canonical_line_check(line: &str, reserialized: String, line_no: usize) -> Result<()> {
    if line != reserialized {
        return Err(SimError::Validation(format!(
            "chain file line {line_no} is not in canonical form"
        )));
    }
    Ok(())
}

/// Load a chain saved by [`save_chain`]. Strict by construction: every line
/// must re-serialize to identical bytes, every weight vector must match the
/// model's parameter count, and the sidecar must be consumed exactly.
pub fn load_chain(jsonl_path: &Path, weights_path: &Path) -> Result<Chain> {
    let text = std::fs::read_to_string(jsonl_path)?;
    if !text.ends_with('\n') {
        return Err(SimError::Validation("chain file must end with a newline".into()));
    }
    let mut lines = text.lines().enumerate();

    let mut weights = BufReader::new(File::open(weights_path)?);
    let mut magic = [0u8; 8];
    weights
        .read_exact(&mut magic)
        .map_err(|e| SimError::Validation(format!("weight sidecar too short: {e}")))?;
    if &magic != WEIGHTS_MAGIC {
        return Err(SimError::Validation("weight sidecar has the wrong magic".into()));
    }

    let (_, header) = lines
        .next()
        .ok_or_else(|| SimError::Validation("chain file is empty".into()))?;
    let genesis_record: GenesisRecord = serde_json::from_str(header)
        .map_err(|e| SimError::Validation(format!("bad genesis header: {e}")))?;
    canonical_line_check(header, serde_json::to_string(&genesis_record)?, 1)?;

    let param_count = genesis_record.model.shape.param_count();
    if genesis_record.initial_weight_shape != genesis_record.model.shape {
        return Err(SimError::Validation("genesis weight shape differs from model".into()));
    }
    let w0 = ParamVector {
        values: read_weight_values(&mut weights, param_count)?,
        shape_tag: genesis_record.model.shape,
    };
    let stored_genesis_hash = decode_hash32(&genesis_record.genesis_hash, "genesis_hash")?;
    let genesis = Genesis::new(
        StakeLedger::new(genesis_record.stakes)?,
        genesis_record.k,
        genesis_record.v,
        genesis_record.aggregator,
        genesis_record.krum_f,
        genesis_record.model,
        genesis_record.shard_sizes,
        genesis_record.attack,
        w0,
    )?;
    if genesis.hash() != stored_genesis_hash {
        return Err(SimError::Validation(
            "stored genesis hash does not match the genesis contents".into(),
        ));
    }

    let mut chain = Chain::new(genesis);
    for (idx, line) in lines {
        let record: BlockRecord = serde_json::from_str(line)
            .map_err(|e| SimError::Validation(format!("bad block on line {}: {e}", idx + 1)))?;
        canonical_line_check(line, serde_json::to_string(&record)?, idx + 1)?;

        let mut worker_weights = BTreeMap::new();
        for &id in &record.workers {
            let values = read_weight_values(&mut weights, param_count)?;
            worker_weights
                .insert(id, ParamVector { values, shape_tag: chain.genesis.model.shape });
        }
        let global_values = read_weight_values(&mut weights, param_count)?;

        let role_seed_bytes = B64
            .decode(&record.role_seed)
            .map_err(|e| SimError::Validation(format!("role_seed is not valid base64: {e}")))?;
        let role_seed: [u8; 8] = role_seed_bytes
            .try_into()
            .map_err(|_| SimError::Validation("role_seed is not 8 bytes".into()))?;

        let roles = RoleAssignment::new(
            record.round,
            record.miner,
            record.validators.clone(),
            record.workers.clone(),
        )?;
        let loss_matrix =
            LossMatrix::new(record.losses, record.validators, record.workers)?;
        let scores = ScoreVector::new(record.scores)?;
        let block = Block {
            round: record.round,
            prev_hash: decode_hash32(&record.prev_hash, "prev_hash")?,
            role_seed,
            roles,
            worker_weights,
            loss_matrix,
            scores,
            global_weight: ParamVector {
                values: global_values,
                shape_tag: chain.genesis.model.shape,
            },
            block_hash: decode_hash32(&record.block_hash, "block_hash")?,
        };
        // linkage and recomputation checks belong to validate_chain; the
        // loader only guarantees well-formed, canonical records
        chain.blocks.push(block);
    }

    let mut extra = [0u8; 1];
    match weights.read(&mut extra) {
        Ok(0) => {}
        Ok(_) => {
            return Err(SimError::Validation("weight sidecar has trailing bytes".into()));
        }
        Err(e) => return Err(SimError::Io(e)),
    }
    Ok(chain)
}
