//! Report generation over a results directory: per-cell comparison table,
//! low-vs-high-heterogeneity robustness scores, per-method rank statistics,
//! and a plot-ready accuracy-vs-malicious-count trend table.
//!
//! A results directory is laid out as `<label>/<aggregator>/seed-<n>/`, one
//! leaf per run, each holding the `summary.json` a run writes. Report
//! generation only reads those summaries; run artifacts are never touched.

use anyhow::{bail, Context, Result};
use fedchain_core::aggregation::AggregatorKind;
use fedchain_core::protocol::RunSummary;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

/// Robustness of a method across heterogeneity levels: the accuracy ratio
/// min/max, in (0, 1], where 1 means unaffected. Accepts accuracies in any
/// consistent positive scale (fractions or percentages).
pub fn robustness_score(acc_lh: f64, acc_hh: f64) -> Result<f64> {
    if !(acc_lh.is_finite() && acc_hh.is_finite() && acc_lh > 0.0 && acc_hh > 0.0) {
        bail!("accuracies must be positive and finite, got {acc_lh} and {acc_hh}");
    }
    Ok(acc_lh.min(acc_hh) / acc_lh.max(acc_hh))
}

/// Competition ranks for one experiment row, 1 = highest value; ties share
/// the lower rank number and the next rank skips past them (1, 2, 2, 4).
pub fn competition_ranks(values: &[f64]) -> Vec<usize> {
    let mut ranks = vec![0usize; values.len()];
    for (i, v) in values.iter().enumerate() {
        let better = values.iter().filter(|x| **x > *v).count();
        ranks[i] = better + 1;
    }
    ranks
}

/// Rank statistics for one method across experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct RankStats {
    pub method: String,
    pub ranks: Vec<usize>,
    pub mean: f64,
    /// Population standard deviation of the ranks.
    pub std: f64,
}

/// Rank every method within every experiment row (highest accuracy = rank
/// 1) and summarize per method. `rows` is experiments x methods.
pub fn rank_methods(methods: &[String], rows: &[Vec<f64>]) -> Result<Vec<RankStats>> {
    if methods.is_empty() || rows.is_empty() {
        bail!("ranking needs at least one method and one experiment");
    }
    if rows.iter().any(|r| r.len() != methods.len()) {
        bail!("every experiment row must cover all {} methods", methods.len());
    }
    let per_row: Vec<Vec<usize>> = rows.iter().map(|r| competition_ranks(r)).collect();
    Ok(methods
        .iter()
        .enumerate()
        .map(|(m, name)| {
            let ranks: Vec<usize> = per_row.iter().map(|r| r[m]).collect();
            let n = ranks.len() as f64;
            let mean = ranks.iter().sum::<usize>() as f64 / n;
            let var = ranks.iter().map(|&r| (r as f64 - mean).powi(2)).sum::<f64>() / n;
            RankStats { method: name.clone(), ranks, mean, std: var.sqrt() }
        })
        .collect())
}

/// One result cell: an experiment label and method, aggregated over seeds.
#[derive(Debug, Clone)]
pub struct CellSummary {
    pub label: String,
    pub method: String,
    pub malicious: usize,
    pub repeats: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_rounds: f64,
}

fn method_order(name: &str) -> usize {
    AggregatorKind::ALL
        .iter()
        .position(|k| k.name() == name)
        .unwrap_or(AggregatorKind::ALL.len())
}

/// Read every `summary.json` under `<label>/<method>/seed-<n>/` and fold
/// them into per-cell summaries, deterministically ordered by label then
/// method.
pub fn collect_cells(results_dir: &Path) -> Result<Vec<CellSummary>> {
    let mut cells: BTreeMap<(String, String), Vec<RunSummary>> = BTreeMap::new();
    let labels = fs::read_dir(results_dir)
        .with_context(|| format!("cannot read results directory {}", results_dir.display()))?;
    for label_entry in labels {
        let label_dir = label_entry?.path();
        if !label_dir.is_dir() {
            continue;
        }
        for method_entry in fs::read_dir(&label_dir)? {
            let method_dir = method_entry?.path();
            if !method_dir.is_dir() {
                continue;
            }
            for seed_entry in fs::read_dir(&method_dir)? {
                let seed_dir = seed_entry?.path();
                let summary_path = seed_dir.join("summary.json");
                if !summary_path.is_file() {
                    continue;
                }
                let text = fs::read_to_string(&summary_path)
                    .with_context(|| format!("cannot read {}", summary_path.display()))?;
                let summary: RunSummary = serde_json::from_str(&text)
                    .with_context(|| format!("bad summary {}", summary_path.display()))?;
                let key = (summary.label.clone(), summary.aggregator.name().to_string());
                cells.entry(key).or_default().push(summary);
            }
        }
    }
    if cells.is_empty() {
        bail!("no run summaries found under {}", results_dir.display());
    }
    let mut out: Vec<CellSummary> = cells
        .into_iter()
        .map(|((label, method), mut runs)| {
            runs.sort_by_key(|r| r.master_seed);
            let n = runs.len() as f64;
            let mean = runs.iter().map(|r| r.final_accuracy).sum::<f64>() / n;
            let var =
                runs.iter().map(|r| (r.final_accuracy - mean).powi(2)).sum::<f64>() / n;
            let mean_rounds = runs.iter().map(|r| r.rounds_run as f64).sum::<f64>() / n;
            CellSummary {
                label,
                method,
                malicious: runs[0].malicious_count,
                repeats: runs.len(),
                mean_accuracy: mean,
                std_accuracy: var.sqrt(),
                mean_rounds,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        a.label.cmp(&b.label).then_with(|| method_order(&a.method).cmp(&method_order(&b.method)))
    });
    Ok(out)
}

fn ordered_methods(cells: &[CellSummary]) -> Vec<String> {
    let set: BTreeSet<&str> = cells.iter().map(|c| c.method.as_str()).collect();
    let mut methods: Vec<String> = set.into_iter().map(String::from).collect();
    methods.sort_by_key(|m| method_order(m));
    methods
}

fn csv_line(fields: &[String]) -> String {
    fields.join(",") + "\n"
}

fn write_comparison(cells: &[CellSummary], path: &Path) -> Result<()> {
    let mut text = String::from(
        "label,aggregator,malicious,repeats,mean_accuracy,std_accuracy,mean_rounds\n",
    );
    for c in cells {
        text.push_str(&csv_line(&[
            c.label.clone(),
            c.method.clone(),
            c.malicious.to_string(),
            c.repeats.to_string(),
            c.mean_accuracy.to_string(),
            c.std_accuracy.to_string(),
            c.mean_rounds.to_string(),
        ]));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Experiment pairs follow the `<name>-lh` / `<name>-hh` label convention.
fn write_robustness(cells: &[CellSummary], path: &Path) -> Result<()> {
    let mut text = String::from("experiment,aggregator,accuracy_lh,accuracy_hh,robustness\n");
    let by_key: BTreeMap<(String, String), &CellSummary> =
        cells.iter().map(|c| ((c.label.clone(), c.method.clone()), c)).collect();
    let mut pairs: BTreeSet<String> = BTreeSet::new();
    for c in cells {
        if let Some(stem) = c.label.strip_suffix("-lh") {
            pairs.insert(stem.to_string());
        }
    }
    for stem in pairs {
        for method in ordered_methods(cells) {
            let lh = by_key.get(&(format!("{stem}-lh"), method.clone()));
            let hh = by_key.get(&(format!("{stem}-hh"), method.clone()));
            if let (Some(lh), Some(hh)) = (lh, hh) {
                let r = robustness_score(lh.mean_accuracy, hh.mean_accuracy)?;
                text.push_str(&csv_line(&[
                    stem.clone(),
                    method,
                    lh.mean_accuracy.to_string(),
                    hh.mean_accuracy.to_string(),
                    r.to_string(),
                ]));
            }
        }
    }
    fs::write(path, text)?;
    Ok(())
}

fn write_rankings(cells: &[CellSummary], path: &Path) -> Result<()> {
    let methods = ordered_methods(cells);
    let labels: BTreeSet<String> = cells.iter().map(|c| c.label.clone()).collect();
    let by_key: BTreeMap<(String, String), f64> = cells
        .iter()
        .map(|c| ((c.label.clone(), c.method.clone()), c.mean_accuracy))
        .collect();
    // only experiments covering every method can be ranked consistently
    let complete: Vec<String> = labels
        .into_iter()
        .filter(|l| methods.iter().all(|m| by_key.contains_key(&(l.clone(), m.clone()))))
        .collect();
    if complete.is_empty() {
        bail!("no experiment covers every method; nothing to rank");
    }
    let rows: Vec<Vec<f64>> = complete
        .iter()
        .map(|l| methods.iter().map(|m| by_key[&(l.clone(), m.clone())]).collect())
        .collect();
    let stats = rank_methods(&methods, &rows)?;

    let mut header = vec!["experiment".to_string()];
    header.extend(methods.iter().cloned());
    let mut text = csv_line(&header);
    for (i, label) in complete.iter().enumerate() {
        let mut fields = vec![label.clone()];
        fields.extend(stats.iter().map(|s| s.ranks[i].to_string()));
        text.push_str(&csv_line(&fields));
    }
    let mut mean_row = vec!["mean_rank".to_string()];
    mean_row.extend(stats.iter().map(|s| s.mean.to_string()));
    text.push_str(&csv_line(&mean_row));
    let mut std_row = vec!["std_rank".to_string()];
    std_row.extend(stats.iter().map(|s| s.std.to_string()));
    text.push_str(&csv_line(&std_row));
    fs::write(path, text)?;
    Ok(())
}

fn write_trends(cells: &[CellSummary], path: &Path) -> Result<()> {
    let methods = ordered_methods(cells);
    let counts: BTreeSet<usize> = cells.iter().map(|c| c.malicious).collect();
    let mut header = vec!["malicious".to_string()];
    header.extend(methods.iter().cloned());
    let mut text = csv_line(&header);
    for count in counts {
        let mut fields = vec![count.to_string()];
        for m in &methods {
            let matching: Vec<f64> = cells
                .iter()
                .filter(|c| c.malicious == count && &c.method == m)
                .map(|c| c.mean_accuracy)
                .collect();
            if matching.is_empty() {
                fields.push(String::new());
            } else {
                let mean = matching.iter().sum::<f64>() / matching.len() as f64;
                fields.push(mean.to_string());
            }
        }
        text.push_str(&csv_line(&fields));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Generate `comparison.csv`, `robustness.csv`, `rankings.csv`, and
/// `trends.csv` at the top of the results directory. Rankings are skipped
/// (with a notice on stderr) when no experiment covers every method.
pub fn emit_report(results_dir: &Path) -> Result<Vec<String>> {
    let cells = collect_cells(results_dir)?;
    let mut written = Vec::new();
    write_comparison(&cells, &results_dir.join("comparison.csv"))?;
    written.push("comparison.csv".to_string());
    write_robustness(&cells, &results_dir.join("robustness.csv"))?;
    written.push("robustness.csv".to_string());
    match write_rankings(&cells, &results_dir.join("rankings.csv")) {
        Ok(()) => written.push("rankings.csv".to_string()),
        Err(e) => eprintln!("rankings skipped: {e}"),
    }
    write_trends(&cells, &results_dir.join("trends.csv"))?;
    written.push("trends.csv".to_string());
    Ok(written)
}
