//! Multi-seed convergence verification: run the instrumented quadratic loop
//! over many seeds, average the weighted gradient-norm sums, and check them
//! against the closed-form bound at fixed checkpoints plus a decay test on
//! the normalized average.

use anyhow::{bail, Result};
use fedchain_core::analysis::{run_algorithm2, ConvergenceTrace, TheoryConfig, TraceRow};
use fedchain_core::models::ModelSpec;
use rayon::prelude::*;

#[derive(Debug, Clone)]
pub struct BoundCheck {
    pub round: u64,
    pub mean_cum: f64,
    pub rhs: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct DecayCheck {
    pub early_round: u64,
    pub late_round: u64,
    /// normalized_average(late) / normalized_average(early)
    pub ratio: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct ConvergenceVerdict {
    /// Pointwise mean of the per-seed traces (alpha and rhs are shared).
    pub mean_trace: ConvergenceTrace,
    pub seeds: u64,
    pub bounds: Vec<BoundCheck>,
    pub decay: Option<DecayCheck>,
    pub pass: bool,
}

impl ConvergenceVerdict {
    /// One human-readable line per check, the format the CLI prints.
    pub fn lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        for b in &self.bounds {
            out.push(format!(
                "bound r={}: weighted sum {:.6} <= bound {:.6} ... {}",
                b.round,
                b.mean_cum,
                b.rhs,
                if b.pass { "pass" } else { "FAIL" }
            ));
        }
        if let Some(d) = &self.decay {
            out.push(format!(
                "decay: normalized average at r={} is {:.4} of r={} ... {}",
                d.late_round,
                d.ratio,
                d.early_round,
                if d.pass { "pass" } else { "FAIL" }
            ));
        }
        out.push(format!(
            "convergence check over {} seeds: {}",
            self.seeds,
            if self.pass { "pass" } else { "FAIL" }
        ));
        out
    }
}

/// Run `num_seeds` instrumented traces (seeds 1..=n) in parallel and judge
/// the averaged trace: the weighted gradient-norm sum must stay below the
/// bound at rounds 10, 100, and the final round (those that exist), and the
/// normalized average at the final round must fall below a tenth of its
/// round-10 value whenever the run reaches round 100.
pub fn check_convergence(cfg: &TheoryConfig, num_seeds: u64) -> Result<ConvergenceVerdict> {
    if num_seeds == 0 {
        bail!("at least one seed is required");
    }
    let spec = ModelSpec::quadratic(vec![0.0; cfg.dim]);
    let traces: Vec<ConvergenceTrace> = (1..=num_seeds)
        .into_par_iter()
        .map(|s| run_algorithm2(&spec, cfg, s).map_err(anyhow::Error::from))
        .collect::<Result<_>>()?;

    let n = traces.len() as f64;
    let rounds = cfg.rounds as usize;
    let mut rows = Vec::with_capacity(rounds);
    for i in 0..rounds {
        let base = &traces[0].rows[i];
        let grad = traces.iter().map(|t| t.rows[i].grad_norm_sq).sum::<f64>() / n;
        let cum = traces.iter().map(|t| t.rows[i].cum_lhs).sum::<f64>() / n;
        rows.push(TraceRow {
            round: base.round,
            alpha: base.alpha,
            grad_norm_sq: grad,
            cum_lhs: cum,
            rhs: base.rhs,
        });
    }
    let mean_trace = ConvergenceTrace { rows };

    let mut checkpoints: Vec<u64> =
        [10, 100, cfg.rounds].into_iter().filter(|&r| r >= 1 && r <= cfg.rounds).collect();
    checkpoints.dedup();
    let bounds: Vec<BoundCheck> = checkpoints
        .iter()
        .map(|&r| {
            let row = &mean_trace.rows[(r - 1) as usize];
            BoundCheck { round: r, mean_cum: row.cum_lhs, rhs: row.rhs, pass: row.cum_lhs <= row.rhs }
        })
        .collect();

    let decay = if cfg.rounds >= 100 {
        let early = mean_trace.normalized_average_at(10).unwrap();
        let late = mean_trace.normalized_average_at(cfg.rounds).unwrap();
        let ratio = late / early;
        Some(DecayCheck { early_round: 10, late_round: cfg.rounds, ratio, pass: ratio < 0.1 })
    } else {
        None
    };

    let pass = bounds.iter().all(|b| b.pass) && decay.as_ref().is_none_or(|d| d.pass);
    Ok(ConvergenceVerdict { mean_trace, seeds: num_seeds, bounds, decay, pass })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_reference_run_passes_bound_checks() {
        let cfg = TheoryConfig::reference(60);
        let verdict = check_convergence(&cfg, 3).unwrap();
        assert_eq!(verdict.bounds.len(), 2); // rounds 10 and 60
        assert!(verdict.bounds.iter().all(|b| b.pass));
        assert!(verdict.decay.is_none());
        assert!(verdict.pass);
        assert_eq!(verdict.mean_trace.rows.len(), 60);
        // the mean trace shares the deterministic columns
        assert_eq!(verdict.mean_trace.rows[9].round, 10);
        let lines = verdict.lines();
        assert_eq!(lines.len(), 3);
        assert!(lines.last().unwrap().contains("pass"));
    }

    #[test]
    fn decay_check_engages_at_one_hundred_rounds() {
        let cfg = TheoryConfig::reference(120);
        let verdict = check_convergence(&cfg, 2).unwrap();
        let decay = verdict.decay.expect("decay check should run");
        assert_eq!(decay.late_round, 120);
        assert!(decay.ratio > 0.0);
    }
}
