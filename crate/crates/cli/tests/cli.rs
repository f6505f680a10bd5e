//! Binary-level checks: subcommand behavior and the exit-code contract
//! (0 success, 1 operational failure such as a tampered chain or a failed
//! check, 2 usage errors such as missing or malformed configs).

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const RUN_TOML: &str = r#"
label = "smoke"
num_participants = 6
k = 4
v = 1
epochs = 2
batch_size = 32
stopping_window = 5
max_rounds = 3
aggregator = "softmax"
seeds = [11]

[lr]
kind = "constant"
value = 0.2

[data]
train_samples = 600
test_samples = 200
classes = 4
input_dim = 10
separation = 6.0
lambda = 100.0
min_shard = 40

[model]
kind = "logistic"
"#;

fn fedchain(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedchain"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn run_validate_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), RUN_TOML).unwrap();

    let out = fedchain(&["run", "run.toml", "--out", "results"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("smoke/softmax/seed-11"));
    let leaf = dir.path().join("results/smoke/softmax/seed-11");
    for artifact in ["chain.jsonl", "chain.weights", "rounds.csv", "summary.json"] {
        assert!(leaf.join(artifact).is_file(), "missing {artifact}");
    }
    let rounds = fs::read_to_string(leaf.join("rounds.csv")).unwrap();
    assert!(rounds.starts_with("round,accuracy,loss,k_value\n"));

    let out = fedchain(&["validate", "results/smoke/softmax/seed-11/chain.jsonl"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("valid"));
    assert!(stdout(&out).contains("3 blocks"));

    // report is read-only over the results tree
    let before = fs::read(leaf.join("chain.jsonl")).unwrap();
    let out = fedchain(&["report", "results"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for table in ["comparison.csv", "robustness.csv", "trends.csv"] {
        assert!(dir.path().join("results").join(table).is_file(), "missing {table}");
    }
    assert_eq!(before, fs::read(leaf.join("chain.jsonl")).unwrap());
    let comparison = fs::read_to_string(dir.path().join("results/comparison.csv")).unwrap();
    assert!(comparison.lines().count() >= 2);
    assert!(comparison.contains("smoke,softmax,0,1,"));

    // --seed overrides the config's seed list
    let out = fedchain(&["run", "run.toml", "--out", "results", "--seed", "99"], dir.path());
    assert_eq!(code(&out), 0);
    assert!(dir.path().join("results/smoke/softmax/seed-99/summary.json").is_file());
    assert!(!dir.path().join("results/smoke/softmax/seed-12").exists());
}

#[test]
fn tampered_chain_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), RUN_TOML).unwrap();
    let out = fedchain(&["run", "run.toml", "--out", "results"], dir.path());
    assert_eq!(code(&out), 0);

    let leaf = dir.path().join("results/smoke/softmax/seed-11");
    let mut jsonl = fs::read(leaf.join("chain.jsonl")).unwrap();
    let mid = jsonl.len() / 2;
    jsonl[mid] ^= 0x01;
    fs::write(dir.path().join("bad.jsonl"), &jsonl).unwrap();
    fs::copy(leaf.join("chain.weights"), dir.path().join("bad.weights")).unwrap();

    let out = fedchain(&["validate", "bad.jsonl"], dir.path());
    assert_eq!(code(&out), 1, "tampering must exit 1");
    assert!(stdout(&out).contains("invalid"));

    // truncated sidecar is also an operational failure
    let weights = fs::read(leaf.join("chain.weights")).unwrap();
    fs::write(dir.path().join("cut.weights"), &weights[..weights.len() - 1]).unwrap();
    fs::copy(leaf.join("chain.jsonl"), dir.path().join("cut.jsonl")).unwrap();
    let out = fedchain(&["validate", "cut.jsonl"], dir.path());
    assert_eq!(code(&out), 1);
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();

    // missing config file
    let out = fedchain(&["run", "nope.toml"], dir.path());
    assert_eq!(code(&out), 2);

    // malformed config: truncated TOML
    fs::write(dir.path().join("broken.toml"), &RUN_TOML[..RUN_TOML.len() / 2]).unwrap();
    let out = fedchain(&["run", "broken.toml"], dir.path());
    assert_eq!(code(&out), 2);

    // config that parses but violates an invariant (k + v + 1 != participants)
    fs::write(dir.path().join("invalid.toml"), RUN_TOML.replace("k = 4", "k = 3")).unwrap();
    let out = fedchain(&["run", "invalid.toml"], dir.path());
    assert_eq!(code(&out), 2);

    // unknown flag and missing subcommand are clap usage errors
    let out = fedchain(&["run", "run.toml", "--bogus"], dir.path());
    assert_eq!(code(&out), 2);
    let out = fedchain(&[], dir.path());
    assert_eq!(code(&out), 2);

    // validate on a missing file is a usage error, not a tamper verdict
    let out = fedchain(&["validate", "nope.jsonl"], dir.path());
    assert_eq!(code(&out), 2);

    // report on a missing directory
    let out = fedchain(&["report", "nowhere"], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn convergence_check_writes_trace_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = fedchain(
        &["convergence-check", "--rounds", "200", "--seeds", "5", "--trace", "trace.csv"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("bound r=10"), "{text}");
    assert!(text.contains("bound r=200"), "{text}");
    assert!(text.contains("decay"), "{text}");
    assert!(text.contains("convergence check over 5 seeds: pass"), "{text}");
    let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(trace.starts_with("r,alpha,grad_norm_sq,cum_lhs,rhs\n"));
    assert_eq!(trace.lines().count(), 201);
}
