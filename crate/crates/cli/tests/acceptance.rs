//! End-to-end acceptance checks. Each check prints one pass/fail line
//! (visible with `cargo test --test acceptance -- --nocapture`); the test
//! fails if any check fails.

use anyhow::{anyhow, ensure, Context, Result};
use fedchain_core::adversary::AttackConfig;
use fedchain_core::aggregation::{
    aggregate_krum, aggregate_median, aggregate_softmax, softmax_scores, AggregatorKind,
    LossMatrix,
};
use fedchain_core::analysis::{check_softmax_mean_inequality, TheoryConfig};
use fedchain_core::chain::{load_chain, validate_chain};
use fedchain_core::models::{ParamVector, ShapeTag};
use fedchain_core::protocol::{
    run_experiment, DataConfig, LrSchedule, ModelConfig, RunConfig, StoppingState,
};
use fedchain_core::seeds::rng_for;
use rand::Rng;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

#[test]
fn acceptance() {
    let checks: [(&str, fn() -> Result<String>); 8] = [
        ("1 aggregation correctness", aggregation_correctness),
        ("2 softmax mean inequalities", mean_inequalities),
        ("3 convergence bound", convergence_bound),
        ("4 attack-defense ordering", attack_defense_ordering),
        ("5 no-attack parity", no_attack_parity),
        ("6 chain integrity", chain_integrity),
        ("7 stopping rule", stopping_rule),
        ("8 batch determinism", batch_determinism),
    ];
    let mut failures = Vec::new();
    for (name, run) in checks {
        match run() {
            Ok(detail) => println!("acceptance {name}: pass ({detail})"),
            Err(e) => {
                println!("acceptance {name}: FAIL ({e:#})");
                failures.push(name);
            }
        }
    }
    assert!(failures.is_empty(), "failed acceptance checks: {failures:?}");
}

fn pv(values: Vec<f64>) -> ParamVector {
    let dim = values.len();
    ParamVector { values, shape_tag: ShapeTag::Quadratic { dim } }
}

/// Independent Krum oracle: full distance matrix, then per candidate the sum
/// of its k-f-2 smallest distances; first minimizer wins.
fn krum_oracle(weights: &[ParamVector], f: usize) -> usize {
    let k = weights.len();
    let mut best = (f64::INFINITY, 0usize);
    for i in 0..k {
        let mut d: Vec<f64> = (0..k)
            .filter(|&j| j != i)
            .map(|j| {
                weights[i]
                    .values
                    .iter()
                    .zip(weights[j].values.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum()
            })
            .collect();
        d.sort_by(f64::total_cmp);
        let score: f64 = d[..k - f - 2].iter().sum();
        if score < best.0 {
            best = (score, i);
        }
    }
    best.1
}

fn aggregation_correctness() -> Result<String> {
    let start = Instant::now();
    let mut rng = rng_for("acceptance-agg", &[1]);
    for case in 0..1000u32 {
        let k = rng.gen_range(3..=9usize);
        let dim = rng.gen_range(1..=8usize);
        let losses: Vec<f64> = (0..k).map(|_| rng.gen_range(-5.0..5.0)).collect();

        // scores sum to one
        let s = softmax_scores(&losses)?;
        let sum: f64 = s.scores.iter().sum();
        ensure!((sum - 1.0).abs() <= 1e-12, "case {case}: scores sum to {sum}");

        // shift invariance is bitwise on exactly representable shifts
        let dyadic: Vec<f64> = (0..k).map(|_| rng.gen_range(-2048i32..=2048) as f64 / 1024.0).collect();
        let c = rng.gen_range(-4096i32..=4096) as f64 / 64.0;
        let shifted: Vec<f64> = dyadic.iter().map(|x| x + c).collect();
        let a = softmax_scores(&dyadic)?;
        let b = softmax_scores(&shifted)?;
        ensure!(
            a.scores.iter().zip(b.scores.iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
            "case {case}: shift by {c} changed the scores"
        );

        // permutation equivariance (rotation)
        let r = rng.gen_range(0..k);
        let rotated: Vec<f64> = (0..k).map(|i| losses[(i + r) % k]).collect();
        let srot = softmax_scores(&rotated)?;
        for i in 0..k {
            ensure!(
                (srot.scores[i] - s.scores[(i + r) % k]).abs() <= 1e-12,
                "case {case}: rotation by {r} moved score {i}"
            );
        }

        // convex-hull containment of the softmax aggregate
        let weights: Vec<ParamVector> =
            (0..k).map(|_| pv((0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect())).collect();
        let matrix = LossMatrix::new(vec![losses.clone()], vec![900], (0..k).collect())?;
        let (global, _) = aggregate_softmax(&weights, &matrix)?;
        for d in 0..dim {
            let lo = weights.iter().map(|w| w.values[d]).fold(f64::INFINITY, f64::min);
            let hi = weights.iter().map(|w| w.values[d]).fold(f64::NEG_INFINITY, f64::max);
            ensure!(
                global.values[d] >= lo - 1e-12 && global.values[d] <= hi + 1e-12,
                "case {case}: coordinate {d} left the hull"
            );
        }

        // median against a per-coordinate sort oracle, bitwise
        let med = aggregate_median(&weights)?;
        for d in 0..dim {
            let mut col: Vec<f64> = weights.iter().map(|w| w.values[d]).collect();
            col.sort_by(f64::total_cmp);
            let want =
                if k % 2 == 1 { col[k / 2] } else { (col[k / 2 - 1] + col[k / 2]) / 2.0 };
            ensure!(
                med.values[d].to_bits() == want.to_bits(),
                "case {case}: median coordinate {d} disagrees with the sort oracle"
            );
        }

        // krum against the exhaustive oracle; the winner is returned verbatim
        let f = rng.gen_range(0..=k - 3);
        let (g, idx) = aggregate_krum(&weights, f)?;
        let want = krum_oracle(&weights, f);
        ensure!(idx == want, "case {case}: krum picked {idx}, oracle {want}");
        ensure!(
            g.values.iter().zip(weights[idx].values.iter()).all(|(a, b)| a.to_bits() == b.to_bits()),
            "case {case}: krum output is not the winner verbatim"
        );
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.1}s, limit 10s");
    Ok(format!("1000 random instances, K<=9, dim<=8, {secs:.2}s"))
}

fn mean_inequalities() -> Result<String> {
    let start = Instant::now();
    let mut rng = rng_for("acceptance-ineq", &[2]);
    let mut worst = f64::INFINITY;
    for case in 0..10_000u32 {
        let d = rng.gen_range(1..=16usize);
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let rep = check_softmax_mean_inequality(&x)?;
        worst = worst.min(rep.upper_margin).min(rep.lower_margin);
        ensure!(
            rep.upper_margin >= -1e-12 && rep.lower_margin >= -1e-12,
            "case {case}: margins {} / {}",
            rep.upper_margin,
            rep.lower_margin
        );
    }
    for case in 0..100u32 {
        let d = rng.gen_range(1..=16usize);
        let v = rng.gen_range(-10.0..10.0);
        let rep = check_softmax_mean_inequality(&vec![v; d])?;
        ensure!(
            rep.upper_margin.abs() < 1e-12 && rep.lower_margin.abs() < 1e-12,
            "case {case}: constant vector should give equality, margins {} / {}",
            rep.upper_margin,
            rep.lower_margin
        );
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 5.0, "took {secs:.1}s, limit 5s");
    Ok(format!("10^4 random vectors, worst margin {worst:.2e}, {secs:.2}s"))
}

fn convergence_bound() -> Result<String> {
    let start = Instant::now();
    let cfg = TheoryConfig::reference(1000);
    let verdict = fedchain_cli::convergence::check_convergence(&cfg, 20)?;
    for b in &verdict.bounds {
        ensure!(
            b.pass,
            "weighted sum {} exceeds bound {} at round {}",
            b.mean_cum,
            b.rhs,
            b.round
        );
    }
    let decay = verdict.decay.as_ref().ok_or_else(|| anyhow!("decay check missing"))?;
    ensure!(decay.pass, "normalized average decayed only to {:.3} of round 10", decay.ratio);
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 120.0, "took {secs:.1}s, limit 120s");
    let summary: Vec<String> =
        verdict.bounds.iter().map(|b| format!("r={}: {:.3}<={:.1}", b.round, b.mean_cum, b.rhs)).collect();
    Ok(format!("20 seeds, {}, decay ratio {:.4}, {secs:.2}s", summary.join(", "), decay.ratio))
}

/// The frozen 20-participant experiment shared by checks 4 and 5.
fn experiment_cell(label: &str, aggregator: AggregatorKind, attacked: bool) -> RunConfig {
    RunConfig {
        label: label.into(),
        num_participants: 20,
        k: 16,
        v: 3,
        epochs: 8,
        lr: LrSchedule::Constant { value: 0.2 },
        batch_size: 32,
        stopping_window: 30,
        max_rounds: 250,
        aggregator,
        krum_f: 0,
        seeds: vec![201, 202, 203, 204, 205],
        data: DataConfig {
            train_samples: 5000,
            test_samples: 1000,
            classes: 4,
            input_dim: 10,
            separation: 6.0,
            lambda: 0.1,
            min_shard: 128,
        },
        model: ModelConfig::Logistic,
        attack: attacked.then(|| {
            AttackConfig::new((0..8).collect(), vec![3, 2, 1, 0], true, 0.5)
                .expect("valid attack config")
        }),
    }
}

type MeanAccuracies = BTreeMap<(String, String), f64>;

/// Run the shared experiment once: four aggregators under 8 label-flippers
/// plus three attack-free baselines, five seeds each.
fn shared_experiment() -> Result<&'static (MeanAccuracies, f64)> {
    static RESULT: OnceLock<std::result::Result<(MeanAccuracies, f64), String>> = OnceLock::new();
    RESULT
        .get_or_init(|| {
            let run = || -> Result<(MeanAccuracies, f64)> {
                let cells = vec![
                    experiment_cell("attacked", AggregatorKind::Softmax, true),
                    experiment_cell("attacked", AggregatorKind::Vanilla, true),
                    experiment_cell("attacked", AggregatorKind::Simple, true),
                    experiment_cell("attacked", AggregatorKind::Median, true),
                    experiment_cell("clean", AggregatorKind::Softmax, false),
                    experiment_cell("clean", AggregatorKind::Vanilla, false),
                    experiment_cell("clean", AggregatorKind::Simple, false),
                ];
                let dir = tempfile::tempdir()?;
                let start = Instant::now();
                let outcomes = fedchain_cli::config::run_batch(&cells, dir.path())?;
                let secs = start.elapsed().as_secs_f64();
                let mut sums: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
                for o in &outcomes {
                    let key =
                        (o.summary.label.clone(), o.summary.aggregator.name().to_string());
                    let e = sums.entry(key).or_insert((0.0, 0));
                    e.0 += o.summary.final_accuracy;
                    e.1 += 1;
                }
                let means =
                    sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
                Ok((means, secs))
            };
            run().map_err(|e| format!("{e:#}"))
        })
        .as_ref()
        .map_err(|e| anyhow!("shared experiment failed: {e}"))
}

fn mean_of(means: &MeanAccuracies, label: &str, method: &str) -> Result<f64> {
    means
        .get(&(label.to_string(), method.to_string()))
        .copied()
        .ok_or_else(|| anyhow!("no mean accuracy for {label}/{method}"))
}

fn attack_defense_ordering() -> Result<String> {
    let (means, secs) = shared_experiment()?;
    let softmax = mean_of(means, "attacked", "softmax")?;
    let vanilla = mean_of(means, "attacked", "vanilla")?;
    let simple = mean_of(means, "attacked", "simple")?;
    let median = mean_of(means, "attacked", "median")?;
    let clean = mean_of(means, "clean", "softmax")?;
    ensure!(softmax > median, "softmax {softmax:.4} not above median {median:.4}");
    ensure!(softmax > vanilla, "softmax {softmax:.4} not above vanilla {vanilla:.4}");
    ensure!(softmax > simple, "softmax {softmax:.4} not above simple {simple:.4}");
    ensure!(
        clean - softmax <= 0.03,
        "attacked softmax {softmax:.4} more than 3 points below attack-free {clean:.4}"
    );
    ensure!(*secs < 900.0, "experiment took {secs:.0}s, limit 900s");
    Ok(format!(
        "softmax {softmax:.4} > median {median:.4}, vanilla {vanilla:.4}, simple {simple:.4}; attack-free gap {:.4}; batch {secs:.1}s",
        clean - softmax
    ))
}

fn no_attack_parity() -> Result<String> {
    let (means, secs) = shared_experiment()?;
    let softmax = mean_of(means, "clean", "softmax")?;
    let vanilla = mean_of(means, "clean", "vanilla")?;
    let simple = mean_of(means, "clean", "simple")?;
    ensure!(
        (softmax - vanilla).abs() <= 0.02,
        "softmax {softmax:.4} not within 2 points of vanilla {vanilla:.4}"
    );
    ensure!(
        softmax >= simple - 0.01,
        "softmax {softmax:.4} more than 1 point below simple {simple:.4}"
    );
    ensure!(*secs < 600.0, "experiment took {secs:.0}s, limit 600s");
    Ok(format!(
        "softmax {softmax:.4} vs vanilla {vanilla:.4} (gap {:.4}), simple {simple:.4}; batch {secs:.1}s",
        (softmax - vanilla).abs()
    ))
}

fn integrity_cell(label: &str, max_rounds: u64) -> RunConfig {
    RunConfig {
        label: label.into(),
        num_participants: 6,
        k: 4,
        v: 1,
        epochs: 2,
        lr: LrSchedule::Constant { value: 0.2 },
        batch_size: 32,
        // window longer than the run so the stopping rule never fires
        stopping_window: max_rounds as usize + 50,
        max_rounds,
        aggregator: AggregatorKind::Softmax,
        krum_f: 0,
        seeds: vec![7],
        data: DataConfig {
            train_samples: 600,
            test_samples: 200,
            classes: 4,
            input_dim: 10,
            separation: 6.0,
            lambda: 100.0,
            min_shard: 40,
        },
        model: ModelConfig::Logistic,
        attack: None,
    }
}

/// Every single-byte corruption must be caught by the loader or by chain
/// validation. Returns how many flips were tried.
fn assert_flips_detected(
    jsonl: &[u8],
    weights: &[u8],
    positions: &[(bool, usize, u8)],
    dir: &Path,
) -> Result<usize> {
    let jsonl_path = dir.join("flip.jsonl");
    let weights_path = dir.join("flip.weights");
    fs::write(&jsonl_path, jsonl)?;
    fs::write(&weights_path, weights)?;
    for &(in_jsonl, pos, mask) in positions {
        let (bytes, path) =
            if in_jsonl { (jsonl, &jsonl_path) } else { (weights, &weights_path) };
        let mut copy = bytes.to_vec();
        copy[pos] ^= mask;
        fs::write(path, &copy)?;
        let detected = match load_chain(&jsonl_path, &weights_path) {
            Err(_) => true,
            Ok(chain) => !validate_chain(&chain).is_valid(),
        };
        fs::write(path, bytes)?;
        ensure!(
            detected,
            "flipping byte {pos} (mask {mask:#04x}) of {} went undetected",
            if in_jsonl { "the chain file" } else { "the weight sidecar" }
        );
    }
    Ok(positions.len())
}

fn chain_integrity() -> Result<String> {
    let start = Instant::now();
    let dir = tempfile::tempdir()?;

    // a 100-round run validates end to end and the committees re-derive
    let big = dir.path().join("big");
    let summary = run_experiment(&integrity_cell("integrity", 100), 7, &big)?;
    ensure!(summary.rounds_run == 100, "run stopped early at {}", summary.rounds_run);
    let chain = load_chain(&big.join("chain.jsonl"), &big.join("chain.weights"))?;
    ensure!(chain.blocks.len() == 100);
    let verdict = validate_chain(&chain);
    ensure!(verdict.is_valid(), "fresh chain failed validation: {verdict}");
    let mut prev = chain.genesis_hash;
    for block in &chain.blocks {
        let roles = chain.genesis.derive_roles(block.round, &prev)?;
        ensure!(roles == block.roles, "round {} roles do not re-derive", block.round);
        prev = block.block_hash;
    }

    // exhaustive single-byte flips over a short chain's two files
    let small = dir.path().join("small");
    run_experiment(&integrity_cell("tamper", 3), 9, &small)?;
    let jsonl = fs::read(small.join("chain.jsonl"))?;
    let weights = fs::read(small.join("chain.weights"))?;
    let mut flips: Vec<(bool, usize, u8)> =
        (0..jsonl.len()).map(|p| (true, p, 0x01)).collect();
    flips.extend((0..weights.len()).map(|p| (false, p, 0x01)));
    let exhaustive = assert_flips_detected(&jsonl, &weights, &flips, dir.path())?;

    // random byte corruptions across the full 100-round artifacts
    let big_jsonl = fs::read(big.join("chain.jsonl"))?;
    let big_weights = fs::read(big.join("chain.weights"))?;
    let mut rng = rng_for("acceptance-flips", &[6]);
    let sampled: Vec<(bool, usize, u8)> = (0..500)
        .map(|_| {
            let in_jsonl = rng.gen_bool(0.5);
            let len = if in_jsonl { big_jsonl.len() } else { big_weights.len() };
            (in_jsonl, rng.gen_range(0..len), rng.gen_range(1..=255u8))
        })
        .collect();
    assert_flips_detected(&big_jsonl, &big_weights, &sampled, dir.path())?;

    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s, limit 60s");
    Ok(format!(
        "100 rounds valid, roles re-derive, {exhaustive} exhaustive + 500 sampled flips all detected, {secs:.2}s"
    ))
}

fn stopping_rule() -> Result<String> {
    let mut state = StoppingState::new();
    for (i, a) in [0.5, 0.6, 0.7, 0.7, 0.7, 0.65].into_iter().enumerate() {
        state.update(a, 3).with_context(|| format!("update {} rejected", i + 1))?;
    }
    ensure!(state.stopped_at == Some(6), "stopped at {:?}, wanted round 6", state.stopped_at);
    ensure!(
        state.final_accuracy == Some(0.7),
        "final accuracy {:?}, wanted exactly 0.7",
        state.final_accuracy
    );
    Ok("window 3 example stops at round 6 with final accuracy 0.7".into())
}

const DETERMINISM_BATCH: &str = r#"
[[cells]]
label = "demo-lh"
num_participants = 6
k = 4
v = 1
epochs = 2
batch_size = 32
stopping_window = 5
max_rounds = 3
aggregator = "softmax"
seeds = [11, 12]

[cells.lr]
kind = "constant"
value = 0.2

[cells.data]
train_samples = 600
test_samples = 200
classes = 4
input_dim = 10
separation = 6.0
lambda = 100.0
min_shard = 40

[cells.model]
kind = "logistic"

[[cells]]
label = "demo-hh"
num_participants = 6
k = 4
v = 1
epochs = 2
batch_size = 32
stopping_window = 5
max_rounds = 3
aggregator = "vanilla"
seeds = [11, 12]

[cells.lr]
kind = "constant"
value = 0.2

[cells.data]
train_samples = 600
test_samples = 200
classes = 4
input_dim = 10
separation = 6.0
lambda = 0.1
min_shard = 40

[cells.model]
kind = "logistic"
"#;

fn walk_files(root: &Path, rel: &Path, out: &mut Vec<std::path::PathBuf>) -> Result<()> {
    for entry in fs::read_dir(root.join(rel))? {
        let entry = entry?;
        let rel_path = rel.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            walk_files(root, &rel_path, out)?;
        } else {
            out.push(rel_path);
        }
    }
    Ok(())
}

fn batch_determinism() -> Result<String> {
    let start = Instant::now();
    let dir = tempfile::tempdir()?;
    let config = dir.path().join("batch.toml");
    fs::write(&config, DETERMINISM_BATCH)?;
    let bin = env!("CARGO_BIN_EXE_fedchain");
    for out in ["one", "two"] {
        let result = Command::new(bin)
            .args(["batch"])
            .arg(&config)
            .arg("--out")
            .arg(dir.path().join(out))
            .output()?;
        ensure!(
            result.status.success(),
            "batch run '{out}' exited with {}: {}",
            result.status,
            String::from_utf8_lossy(&result.stderr)
        );
    }
    let (one, two) = (dir.path().join("one"), dir.path().join("two"));

    let comparison_a = fs::read(one.join("comparison.csv"))?;
    let comparison_b = fs::read(two.join("comparison.csv"))?;
    ensure!(comparison_a == comparison_b, "comparison.csv differs between runs");

    let mut files_a = Vec::new();
    walk_files(&one, Path::new(""), &mut files_a)?;
    files_a.sort();
    let mut files_b = Vec::new();
    walk_files(&two, Path::new(""), &mut files_b)?;
    files_b.sort();
    ensure!(files_a == files_b, "the two runs produced different file sets");
    let mut tips = 0;
    for rel in &files_a {
        let a = fs::read(one.join(rel))?;
        let b = fs::read(two.join(rel))?;
        ensure!(a == b, "{} differs between runs", rel.display());
        if rel.file_name().is_some_and(|n| n == "summary.json") {
            let summary: serde_json::Value = serde_json::from_slice(&a)?;
            ensure!(summary["tip_hash"].is_string(), "summary without a tip hash");
            tips += 1;
        }
    }
    ensure!(tips == 4, "expected 4 run summaries, saw {tips}");
    let secs = start.elapsed().as_secs_f64();
    Ok(format!(
        "two batch runs byte-identical across {} files incl. comparison.csv and {tips} chain tips, {secs:.2}s",
        files_a.len()
    ))
}
