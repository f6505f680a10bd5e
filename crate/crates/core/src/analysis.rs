//! Numerical verification of the convergence theory on the quadratic
//! objective, where the Lipschitz constant, the optimum, and the exact
//! gradient are all known in closed form.
//!
//! The instrumented training loop mirrors the aggregation protocol — K
//! workers take noisy single-sample gradient steps, oracle validators report
//! losses to a per-round precision schedule, the update is the softmax
//! combination — while the trace records the weighted gradient-norm sum the
//! convergence bound constrains.

use crate::error::{Result, SimError};
use crate::models::{eval_gradient, eval_loss, Minibatch, ModelSpec, ParamVector, ShapeTag};
use crate::protocol::LrSchedule;
use crate::aggregation::softmax_scores;
use crate::seeds::rng_for;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Constants of the convergence bound and the instrumented run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    /// Problem dimension d.
    pub dim: usize,
    /// Squared distance of the start point from the optimum.
    pub distance_sq: f64,
    /// Gradient Lipschitz constant L (the quadratic has L = 1).
    pub lipschitz: f64,
    /// Offset delta in (0, 1).
    pub delta: f64,
    /// Gradient-variance bound M; noise is N(0, M/d) per coordinate.
    pub noise: f64,
    /// Validator precision target for the final estimates.
    pub epsilon: f64,
    /// Validator precision for the first-stage magnitude probes.
    pub epsilon_tilde: f64,
    pub lr: LrSchedule,
    /// Mini-batch size B_r (constant across rounds).
    pub batch: usize,
    /// Local steps E per worker per round.
    pub epochs: usize,
    pub workers: usize,
    pub validators: usize,
    pub rounds: u64,
}

impl TheoryConfig {
    /// Reference configuration: quadratic in R^10 half a unit from the
    /// optimum, harmonic rates alpha_r = 1/(2+r).
    pub fn reference(rounds: u64) -> Self {
        TheoryConfig {
            dim: 10,
            distance_sq: 0.5,
            lipschitz: 1.0,
            delta: 0.01,
            noise: 0.1,
            epsilon: 0.1,
            epsilon_tilde: 0.01,
            lr: LrSchedule::Harmonic { offset: 2.0 },
            batch: 1,
            epochs: 1,
            workers: 5,
            validators: 3,
            rounds,
        }
    }

    /// Validate the schedule conditions the bound requires:
    /// L^2 a^2 (E+1)(E-2)/2 + L a E <= 1 and 1 - delta >= L^2 a^2 for every
    /// round's rate a.
    pub fn check(&self) -> Result<()> {
        if self.dim == 0
            || self.workers == 0
            || self.validators == 0
            || self.epochs == 0
            || self.batch == 0
            || self.rounds == 0
        {
            return Err(SimError::Config("theory config has an empty dimension".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(SimError::Config("delta must lie in (0, 1)".into()));
        }
        for x in [self.distance_sq, self.lipschitz, self.noise, self.epsilon, self.epsilon_tilde]
        {
            if !x.is_finite() || x < 0.0 {
                return Err(SimError::Config("theory constants must be finite and >= 0".into()));
            }
        }
        if self.lipschitz == 0.0 || self.epsilon == 0.0 || self.epsilon_tilde == 0.0 {
            return Err(SimError::Config(
                "lipschitz, epsilon and epsilon_tilde must be positive".into(),
            ));
        }
        let l = self.lipschitz;
        let e = self.epochs as f64;
        for r in 1..=self.rounds {
            let a = self.lr.rate(r);
            if !(a.is_finite() && a > 0.0) {
                return Err(SimError::Config(format!("rate at round {r} is not positive")));
            }
            let cond1 = l * l * a * a * (e + 1.0) * (e - 2.0) / 2.0 + l * a * e;
            if cond1 > 1.0 {
                return Err(SimError::Config(format!(
                    "schedule violates L^2 a^2 (E+1)(E-2)/2 + L a E <= 1 at round {r} ({cond1})"
                )));
            }
            if 1.0 - self.delta < l * l * a * a {
                return Err(SimError::Config(format!(
                    "schedule violates 1 - delta >= L^2 a^2 at round {r}"
                )));
            }
        }
        Ok(())
    }
}

/// A validator's loss estimate: the true value plus noise bounded by
/// `tolerance`, drawn from the caller's stream. A non-positive tolerance
/// degenerates to the exact value.
pub fn oracle_validator_loss<R: Rng>(true_loss: f64, tolerance: f64, rng: &mut R) -> f64 {
    if tolerance <= 0.0 {
        return true_loss;
    }
    true_loss + rng.gen_range(-tolerance..tolerance)
}

/// First-stage magnitude bound m_j^r = max_i |estimate_j(w_i)| + eps_tilde.
pub fn stage_one_magnitude(estimates: &[f64], epsilon_tilde: f64) -> f64 {
    estimates.iter().fold(0.0f64, |m, x| m.max(x.abs())) + epsilon_tilde
}

/// Final-stage tolerance eps / (2^r K^{5/2} m_j^r).
pub fn validator_tolerance(epsilon: f64, round: u64, workers: usize, m_jr: f64) -> f64 {
    epsilon / (2f64.powi(round.min(2000) as i32) * (workers as f64).powf(2.5) * m_jr)
}

/// One instrumented round in the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: u64,
    pub alpha: f64,
    /// Exact squared gradient norm at the round's starting point.
    pub grad_norm_sq: f64,
    /// Running sum of alpha_r * grad_norm_sq.
    pub cum_lhs: f64,
    /// Bound evaluated through this round.
    pub rhs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub rows: Vec<TraceRow>,
}

impl ConvergenceTrace {
    pub fn cum_lhs_at(&self, round: u64) -> Option<f64> {
        self.rows.iter().find(|r| r.round == round).map(|r| r.cum_lhs)
    }

    /// cum_lhs / R, the normalized weighted average the checks track.
    pub fn normalized_average_at(&self, round: u64) -> Option<f64> {
        self.cum_lhs_at(round).map(|c| c / round as f64)
    }
}

/// The bound: 2(F0 - F*)/(E-1+delta)
///           + sum_r L E a_r^2 M [6E + L(2E-1)(E-1) a_r] / (6 B_r (E-1+delta))
///           + 2 eps/(E-1+delta), evaluated through `rounds`.
pub fn theorem1_rhs(cfg: &TheoryConfig, rounds: u64, f0: f64, fstar: f64) -> f64 {
    let l = cfg.lipschitz;
    let e = cfg.epochs as f64;
    let denom = e - 1.0 + cfg.delta;
    let mut rhs = 2.0 * (f0 - fstar) / denom + 2.0 * cfg.epsilon / denom;
    for r in 1..=rounds {
        let a = cfg.lr.rate(r);
        rhs += l * e * a * a * cfg.noise * (6.0 * e + l * (2.0 * e - 1.0) * (e - 1.0) * a)
            / (6.0 * cfg.batch as f64 * denom);
    }
    rhs
}

fn quadratic_target(spec: &ModelSpec) -> Result<&[f64]> {
    match spec.shape {
        ShapeTag::Quadratic { .. } => Ok(&spec.quadratic_target),
        _ => Err(SimError::Config("theory instrumentation needs the quadratic model".into())),
    }
}

/// Run the instrumented loop for one seed: K workers take E noisy
/// single-sample gradient steps per round, V oracle validators estimate each
/// worker's loss to the two-stage precision schedule, and the update is the
/// softmax combination. Records the exact gradient-norm trace.
pub fn run_algorithm2(spec: &ModelSpec, cfg: &TheoryConfig, seed: u64) -> Result<ConvergenceTrace> {
    cfg.check()?;
    let target = quadratic_target(spec)?;
    if target.len() != cfg.dim {
        return Err(SimError::Config(format!(
            "quadratic target has dim {} but the config says {}",
            target.len(),
            cfg.dim
        )));
    }
    if (cfg.lipschitz - 1.0).abs() > 1e-12 {
        return Err(SimError::Config(
            "the quadratic objective has L = 1; set lipschitz accordingly".into(),
        ));
    }
    // dummy row: the quadratic objective never reads the minibatch
    let dummy_x = vec![vec![0.0]];
    let dummy_y = vec![0usize];
    let dummy = Minibatch::new(&dummy_x, &dummy_y)?;

    let offset = (cfg.distance_sq / cfg.dim as f64).sqrt();
    let mut w = ParamVector {
        values: target.iter().map(|t| t + offset).collect(),
        shape_tag: spec.shape,
    };
    let f0 = eval_loss(spec, &w, &dummy)?;
    let fstar = 0.0;

    let noise_sd = (cfg.noise / cfg.dim as f64).sqrt();
    let normal = Normal::new(0.0, noise_sd)
        .map_err(|e| SimError::Config(format!("bad noise parameter: {e}")))?;
    let mut cum = 0.0;
    let mut rhs = theorem1_rhs(cfg, 0, f0, fstar);
    let denom = cfg.epochs as f64 - 1.0 + cfg.delta;
    let mut rows = Vec::with_capacity(cfg.rounds as usize);

    for r in 1..=cfg.rounds {
        let a = cfg.lr.rate(r);
        let g = eval_gradient(spec, &w, &dummy)?;
        let grad_norm_sq: f64 = g.values.iter().map(|x| x * x).sum();
        cum += a * grad_norm_sq;
        {
            let l = cfg.lipschitz;
            let e = cfg.epochs as f64;
            rhs += l * e * a * a * cfg.noise
                * (6.0 * e + l * (2.0 * e - 1.0) * (e - 1.0) * a)
                / (6.0 * cfg.batch as f64 * denom);
        }
        rows.push(TraceRow { round: r, alpha: a, grad_norm_sq, cum_lhs: cum, rhs });

        // K workers: E noisy gradient steps from the shared iterate
        let mut workers: Vec<ParamVector> = Vec::with_capacity(cfg.workers);
        for i in 0..cfg.workers {
            let mut wi = w.clone();
            let mut rng = rng_for("alg2-noise", &[seed, r, i as u64]);
            for _ in 0..cfg.epochs {
                let gi = eval_gradient(spec, &wi, &dummy)?;
                for (x, gx) in wi.values.iter_mut().zip(gi.values.iter()) {
                    *x -= a * (gx + normal.sample(&mut rng));
                }
            }
            workers.push(wi);
        }

        // oracle validators: stage-one magnitude probes, then the final
        // estimates at tolerance eps / (2^r K^{5/2} m_j^r)
        let true_losses: Vec<f64> = workers
            .iter()
            .map(|wi| eval_loss(spec, wi, &dummy))
            .collect::<Result<_>>()?;
        let mut mean_estimates = vec![0.0; cfg.workers];
        for j in 0..cfg.validators {
            let mut rng1 = rng_for("alg2-stage1", &[seed, r, j as u64]);
            let stage1: Vec<f64> = true_losses
                .iter()
                .map(|&f| oracle_validator_loss(f, cfg.epsilon_tilde, &mut rng1))
                .collect();
            let m_jr = stage_one_magnitude(&stage1, cfg.epsilon_tilde);
            let tol = validator_tolerance(cfg.epsilon, r, cfg.workers, m_jr);
            let mut rng2 = rng_for("alg2-stage2", &[seed, r, j as u64]);
            for (i, &f) in true_losses.iter().enumerate() {
                mean_estimates[i] += oracle_validator_loss(f, tol, &mut rng2);
            }
        }
        for x in mean_estimates.iter_mut() {
            *x /= cfg.validators as f64;
        }

        let scores = softmax_scores(&mean_estimates)?;
        let mut next = vec![0.0; cfg.dim];
        for (wi, &p) in workers.iter().zip(scores.scores.iter()) {
            for (n, x) in next.iter_mut().zip(wi.values.iter()) {
                *n += p * x;
            }
        }
        w = ParamVector { values: next, shape_tag: spec.shape };
    }
    Ok(ConvergenceTrace { rows })
}

/// Rate-weighted round sampling: a 1-based round index drawn with
/// probability proportional to its rate.
pub fn sample_round_index<R: Rng>(alphas: &[f64], rng: &mut R) -> Result<u64> {
    if alphas.is_empty() {
        return Err(SimError::Config("no rounds to sample from".into()));
    }
    if alphas.iter().any(|a| !a.is_finite() || *a < 0.0) {
        return Err(SimError::Config("rates must be finite and >= 0".into()));
    }
    let total: f64 = alphas.iter().sum();
    if total <= 0.0 {
        return Err(SimError::Config("at least one rate must be positive".into()));
    }
    let u = rng.gen_range(0.0..total);
    let mut acc = 0.0;
    for (i, &a) in alphas.iter().enumerate() {
        acc += a;
        if u < acc {
            return Ok(i as u64 + 1);
        }
    }
    Ok(alphas.len() as u64)
}

/// Margins of the softmax-vs-mean inequalities for one input vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanInequalityReport {
    /// sum softmax(x)_i x_i - mean(x), expected >= 0.
    pub upper_margin: f64,
    /// mean(x) - sum softmax(-x)_i x_i, expected >= 0.
    pub lower_margin: f64,
}

/// Check that the softmax-weighted average dominates the plain mean (and the
/// negated-softmax average is dominated by it), returning both margins.
pub fn check_softmax_mean_inequality(x: &[f64]) -> Result<MeanInequalityReport> {
    if x.is_empty() {
        return Err(SimError::Config("empty vector".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(SimError::Config("entries must be finite".into()));
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    // softmax(x): scores of the NEGATED losses, i.e. softmax_scores(-x)
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    let up = softmax_scores(&neg)?; // exp(+x) weighting
    let down = softmax_scores(x)?; // exp(-x) weighting
    let upper: f64 = up.scores.iter().zip(x.iter()).map(|(p, v)| p * v).sum();
    let lower: f64 = down.scores.iter().zip(x.iter()).map(|(p, v)| p * v).sum();
    Ok(MeanInequalityReport { upper_margin: upper - mean, lower_margin: mean - lower })
}

/// Median of `samples` gradient norms drawn at rate-proportional rounds from
/// the first `rounds` rows of the trace.
pub fn sampled_grad_norm_median<R: Rng>(
    trace: &ConvergenceTrace,
    rounds: u64,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    let rows: Vec<&TraceRow> = trace.rows.iter().filter(|row| row.round <= rounds).collect();
    if rows.is_empty() || samples == 0 {
        return Err(SimError::Config("nothing to sample".into()));
    }
    let alphas: Vec<f64> = rows.iter().map(|row| row.alpha).collect();
    let mut drawn: Vec<f64> = (0..samples)
        .map(|_| {
            let idx = sample_round_index(&alphas, rng)?;
            Ok(rows[(idx - 1) as usize].grad_norm_sq)
        })
        .collect::<Result<_>>()?;
    drawn.sort_by(f64::total_cmp);
    let n = drawn.len();
    Ok(if n % 2 == 1 { drawn[n / 2] } else { 0.5 * (drawn[n / 2 - 1] + drawn[n / 2]) })
}

/// Write the trace as `r,alpha,grad_norm_sq,cum_lhs,rhs`.
pub fn write_trace_csv(trace: &ConvergenceTrace, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(SimError::from)?;
    w.write_record(["r", "alpha", "grad_norm_sq", "cum_lhs", "rhs"]).map_err(SimError::from)?;
    for row in &trace.rows {
        w.write_record([
            row.round.to_string(),
            row.alpha.to_string(),
            row.grad_norm_sq.to_string(),
            row.cum_lhs.to_string(),
            row.rhs.to_string(),
        ])
        .map_err(SimError::from)?;
    }
    w.flush()?;
    Ok(())
}
