//! Aggregation rules for combining worker updates.
//!
//! The committee's loss reports arrive as a V x K matrix; the miner averages
//! them per worker and converts the averaged losses into a probability vector
//! with a numerically stabilized softmax over negated losses, so lower loss
//! earns higher weight. Besides that headline rule (and its accuracy-driven
//! twin) the module ships the comparison baselines: sample-size weighted
//! FedAvg, the unweighted mean, the coordinate-wise median, and Krum.
//!
//! All reductions run in ascending participant-id order so results are
//! bit-reproducible; chain validation recomputes them and compares exact
//! bits.

use crate::error::{Result, SimError};
use crate::models::ParamVector;
use serde::{Deserialize, Serialize};

/// V x K matrix of validator-reported values: entry (j, i) is validator j's
/// measurement of worker i's model (loss, or accuracy for the accuracy
/// variant). Rows and columns are ordered by ascending participant id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossMatrix {
    pub entries: Vec<Vec<f64>>,
    pub validator_ids: Vec<usize>,
    pub worker_ids: Vec<usize>,
}

impl LossMatrix {
    pub fn new(
        entries: Vec<Vec<f64>>,
        validator_ids: Vec<usize>,
        worker_ids: Vec<usize>,
    ) -> Result<Self> {
        if validator_ids.is_empty() || worker_ids.is_empty() {
            return Err(SimError::DimensionMismatch(
                "loss matrix needs at least one validator and one worker".into(),
            ));
        }
        if entries.len() != validator_ids.len() {
            return Err(SimError::DimensionMismatch(format!(
                "{} rows vs {} validator ids",
                entries.len(),
                validator_ids.len()
            )));
        }
        for row in &entries {
            if row.len() != worker_ids.len() {
                return Err(SimError::DimensionMismatch(format!(
                    "row of width {} vs {} worker ids",
                    row.len(),
                    worker_ids.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(SimError::Validation("non-finite loss entry".into()));
            }
        }
        if !is_strictly_ascending(&validator_ids) || !is_strictly_ascending(&worker_ids) {
            return Err(SimError::Validation(
                "participant ids must be strictly ascending".into(),
            ));
        }
        Ok(LossMatrix { entries, validator_ids, worker_ids })
    }

    pub fn num_validators(&self) -> usize {
        self.validator_ids.len()
    }

    pub fn num_workers(&self) -> usize {
        self.worker_ids.len()
    }
}

fn is_strictly_ascending(ids: &[usize]) -> bool {
    ids.windows(2).all(|w| w[0] < w[1])
}

/// Probability weights over the round's workers: positive, summing to 1
/// within 1e-12.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
}

impl ScoreVector {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(SimError::DimensionMismatch("empty score vector".into()));
        }
        if scores.iter().any(|s| !s.is_finite() || *s <= 0.0 || *s > 1.0) {
            return Err(SimError::Validation(format!(
                "scores must lie in (0, 1]: {scores:?}"
            )));
        }
        let sum: f64 = scores.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(SimError::Validation(format!("scores sum to {sum}, not 1")));
        }
        Ok(ScoreVector { scores })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Which aggregation rule a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    Softmax,
    SoftmaxAccuracy,
    Vanilla,
    Simple,
    Median,
    Krum,
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 6] = [
        AggregatorKind::Softmax,
        AggregatorKind::SoftmaxAccuracy,
        AggregatorKind::Vanilla,
        AggregatorKind::Simple,
        AggregatorKind::Median,
        AggregatorKind::Krum,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AggregatorKind::Softmax => "softmax",
            AggregatorKind::SoftmaxAccuracy => "softmax_accuracy",
            AggregatorKind::Vanilla => "vanilla",
            AggregatorKind::Simple => "simple",
            AggregatorKind::Median => "median",
            AggregatorKind::Krum => "krum",
        }
    }
}

impl std::fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AggregatorKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        AggregatorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| SimError::Config(format!("unknown aggregator '{s}'")))
    }
}

/// Column means of the loss matrix: the committee-averaged loss per worker,
/// summed over validators in stored (ascending-id) order.
pub fn mean_loss(l: &LossMatrix) -> Vec<f64> {
    let v = l.num_validators() as f64;
    let k = l.num_workers();
    let mut means = vec![0.0; k];
    for row in &l.entries {
        for (m, x) in means.iter_mut().zip(row.iter()) {
            *m += x;
        }
    }
    for m in means.iter_mut() {
        *m /= v;
    }
    means
}

/// Softmax over negated losses with max-shift stabilization:
/// p_i = exp(-F_i) / sum_s exp(-F_s). Lower loss, higher score; adding a
/// constant to every loss leaves the result bit-identical.
pub fn softmax_scores(losses: &[f64]) -> Result<ScoreVector> {
    signed_softmax(losses, -1.0)
}

/// Softmax over raw values (higher in, higher out) — the accuracy variant.
pub fn softmax_scores_from_accuracy(accuracies: &[f64]) -> Result<ScoreVector> {
    signed_softmax(accuracies, 1.0)
}

fn signed_softmax(values: &[f64], sign: f64) -> Result<ScoreVector> {
    if values.is_empty() {
        return Err(SimError::DimensionMismatch("empty input to softmax".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(SimError::Validation(format!("non-finite softmax input: {values:?}")));
    }
    let z: Vec<f64> = values.iter().map(|v| sign * v).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|zi| (zi - m).exp()).collect();
    let denom: f64 = exps.iter().sum();
    ScoreVector::new(exps.iter().map(|e| e / denom).collect())
}

fn check_uniform_shape(weights: &[ParamVector]) -> Result<()> {
    let first = weights
        .first()
        .ok_or_else(|| SimError::DimensionMismatch("no weights to aggregate".into()))?;
    for w in weights {
        if w.shape_tag != first.shape_tag || w.len() != first.len() {
            return Err(SimError::DimensionMismatch(format!(
                "mixed shapes in aggregation: {:?} vs {:?}",
                w.shape_tag, first.shape_tag
            )));
        }
    }
    Ok(())
}

fn weighted_sum(weights: &[ParamVector], coeffs: &[f64]) -> ParamVector {
    let mut out = vec![0.0; weights[0].len()];
    for (w, &c) in weights.iter().zip(coeffs.iter()) {
        for (o, v) in out.iter_mut().zip(w.values.iter()) {
            *o += c * v;
        }
    }
    ParamVector { values: out, shape_tag: weights[0].shape_tag }
}

/// Softmax-weighted average of the workers' models, driven by the committee's
/// mean losses. Returns the scores alongside for block inclusion.
pub fn aggregate_softmax(
    weights: &[ParamVector],
    l: &LossMatrix,
) -> Result<(ParamVector, ScoreVector)> {
    check_uniform_shape(weights)?;
    if weights.len() != l.num_workers() {
        return Err(SimError::DimensionMismatch(format!(
            "{} weight vectors vs {} loss columns",
            weights.len(),
            l.num_workers()
        )));
    }
    let scores = softmax_scores(&mean_loss(l))?;
    let agg = weighted_sum(weights, &scores.scores);
    Ok((agg, scores))
}

/// Accuracy-driven softmax average: higher committee-averaged accuracy earns
/// higher weight (exp(+a), not the loss rule's exp(-f)).
pub fn aggregate_softmax_accuracy(
    weights: &[ParamVector],
    a: &LossMatrix,
) -> Result<(ParamVector, ScoreVector)> {
    check_uniform_shape(weights)?;
    if weights.len() != a.num_workers() {
        return Err(SimError::DimensionMismatch(format!(
            "{} weight vectors vs {} accuracy columns",
            weights.len(),
            a.num_workers()
        )));
    }
    let scores = softmax_scores_from_accuracy(&mean_loss(a))?;
    let agg = weighted_sum(weights, &scores.scores);
    Ok((agg, scores))
}

/// FedAvg: weights proportional to local sample counts.
pub fn aggregate_vanilla(weights: &[ParamVector], sample_sizes: &[usize]) -> Result<ParamVector> {
    check_uniform_shape(weights)?;
    if weights.len() != sample_sizes.len() {
        return Err(SimError::DimensionMismatch(format!(
            "{} weight vectors vs {} sample sizes",
            weights.len(),
            sample_sizes.len()
        )));
    }
    let total: usize = sample_sizes.iter().sum();
    if total == 0 {
        return Err(SimError::Config("all sample sizes are zero".into()));
    }
    let coeffs: Vec<f64> = sample_sizes.iter().map(|&n| n as f64 / total as f64).collect();
    Ok(weighted_sum(weights, &coeffs))
}

/// Unweighted mean of the workers' models.
pub fn aggregate_simple(weights: &[ParamVector]) -> Result<ParamVector> {
    check_uniform_shape(weights)?;
    let c = 1.0 / weights.len() as f64;
    Ok(weighted_sum(weights, &vec![c; weights.len()]))
}

/// Coordinate-wise median; an even count takes the midpoint of the middle
/// pair.
pub fn aggregate_median(weights: &[ParamVector]) -> Result<ParamVector> {
    check_uniform_shape(weights)?;
    let k = weights.len();
    let dim = weights[0].len();
    let mut out = vec![0.0; dim];
    let mut column = vec![0.0; k];
    for d in 0..dim {
        for (c, w) in column.iter_mut().zip(weights.iter()) {
            *c = w.values[d];
        }
        column.sort_unstable_by(f64::total_cmp);
        out[d] = if k % 2 == 1 {
            column[k / 2]
        } else {
            (column[k / 2 - 1] + column[k / 2]) / 2.0
        };
    }
    Ok(ParamVector { values: out, shape_tag: weights[0].shape_tag })
}

/// Krum selection assuming at most `f` Byzantine workers: each candidate is
/// scored by the sum of squared distances to its K - f - 2 nearest other
/// vectors, and the minimizer (lowest id on ties) is returned verbatim.
pub fn aggregate_krum(weights: &[ParamVector], f: usize) -> Result<(ParamVector, usize)> {
    check_uniform_shape(weights)?;
    let k = weights.len();
    if k < f + 3 {
        return Err(SimError::Config(format!(
            "krum needs at least f + 3 = {} workers, got {k}",
            f + 3
        )));
    }
    let neighbors = k - f - 2;
    let mut best_idx = 0usize;
    let mut best_score = f64::INFINITY;
    let mut dists = Vec::with_capacity(k - 1);
    for i in 0..k {
        dists.clear();
        for j in 0..k {
            if j == i {
                continue;
            }
            let d2: f64 = weights[i]
                .values
                .iter()
                .zip(weights[j].values.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push(d2);
        }
        dists.sort_unstable_by(f64::total_cmp);
        let score: f64 = dists[..neighbors].iter().sum();
        if score < best_score {
            best_score = score;
            best_idx = i;
        }
    }
    Ok((weights[best_idx].clone(), best_idx))
}
