//! TOML configuration loading and the multi-run batch driver.
//!
//! A run config file is one experiment cell: a complete `RunConfig` at the
//! top level. A batch file is an array of tables, `[[cells]]`, each a
//! complete run config; cells must not repeat a (label, aggregator) pair
//! because results land in `<out>/<label>/<aggregator>/seed-<n>/`.

use anyhow::{bail, Context, Result};
use fedchain_core::analysis::TheoryConfig;
use fedchain_core::protocol::{run_experiment, RunConfig, RunSummary};
use rayon::prelude::*;
use serde::Deserialize;
use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

/// A batch of experiment cells, run over every (cell, seed) pair.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchConfig {
    pub cells: Vec<RunConfig>,
}

fn read_toml(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(&read_toml(path)?)
        .with_context(|| format!("malformed run config {}", path.display()))?;
    cfg.check().with_context(|| format!("invalid run config {}", path.display()))?;
    Ok(cfg)
}

pub fn load_batch_config(path: &Path) -> Result<BatchConfig> {
    let batch: BatchConfig = toml::from_str(&read_toml(path)?)
        .with_context(|| format!("malformed batch config {}", path.display()))?;
    if batch.cells.is_empty() {
        bail!("batch config {} has no cells", path.display());
    }
    let mut seen = BTreeSet::new();
    for cell in &batch.cells {
        cell.check().with_context(|| format!("invalid cell {:?}", cell.label))?;
        if !seen.insert((cell.label.clone(), cell.aggregator.name())) {
            bail!(
                "duplicate cell {:?} with aggregator {}; results would collide",
                cell.label,
                cell.aggregator.name()
            );
        }
    }
    Ok(batch)
}

pub fn load_theory_config(path: &Path) -> Result<TheoryConfig> {
    let cfg: TheoryConfig = toml::from_str(&read_toml(path)?)
        .with_context(|| format!("malformed theory config {}", path.display()))?;
    cfg.check().with_context(|| format!("invalid theory config {}", path.display()))?;
    Ok(cfg)
}

/// One completed run within a batch.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub summary: RunSummary,
}

/// Directory a single run writes into.
pub fn run_dir(out: &Path, cfg: &RunConfig, seed: u64) -> PathBuf {
    out.join(&cfg.label).join(cfg.aggregator.name()).join(format!("seed-{seed}"))
}

/// Execute every (cell, seed) pair in parallel. Each run is seeded only by
/// its own master seed, so the schedule has no effect on the results.
pub fn run_batch(cells: &[RunConfig], out: &Path) -> Result<Vec<RunOutcome>> {
    let jobs: Vec<(&RunConfig, u64)> =
        cells.iter().flat_map(|c| c.seeds.iter().map(move |&s| (c, s))).collect();
    jobs.par_iter()
        .map(|(cfg, seed)| {
            let dir = run_dir(out, cfg, *seed);
            let summary = run_experiment(cfg, *seed, &dir)
                .with_context(|| format!("run {:?} seed {seed} failed", cfg.label))?;
            Ok(RunOutcome { dir, summary })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedchain_core::aggregation::AggregatorKind;

    const RUN_TOML: &str = r#"
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

    const ATTACK_TOML: &str = r#"
[attack]
malicious_ids = [0, 1]
flip_map = [3, 2, 1, 0]
validators_can_be_malicious = true
max_malicious_validator_fraction = 0.5
"#;

    fn write_tmp(dir: &Path, name: &str, text: &str) -> PathBuf {
        let path = dir.join(name);
        fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn run_config_round_trips_from_toml() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tmp(dir.path(), "run.toml", RUN_TOML);
        let cfg = load_run_config(&path).unwrap();
        assert_eq!(cfg.label, "demo-lh");
        assert_eq!(cfg.k, 4);
        assert_eq!(cfg.seeds, vec![11, 12]);
        assert_eq!(cfg.aggregator, AggregatorKind::Softmax);
        assert!(cfg.attack.is_none());

        let with_attack = format!("{RUN_TOML}\n{ATTACK_TOML}");
        let path = write_tmp(dir.path(), "attack.toml", &with_attack);
        let cfg = load_run_config(&path).unwrap();
        let attack = cfg.attack.unwrap();
        assert_eq!(attack.flip_map, vec![3, 2, 1, 0]);
        assert!(attack.is_malicious(1));
        assert!(!attack.is_malicious(2));
    }

    #[test]
    fn unknown_fields_and_bad_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        // top-level key nothing declares (appending after [model] would land
        // inside the model table and be absorbed by the tagged enum)
        let path = write_tmp(dir.path(), "bad.toml", &format!("bogus = 1\n{RUN_TOML}"));
        assert!(load_run_config(&path).is_err());
        // k + v + 1 must equal num_participants
        let broken = RUN_TOML.replace("k = 4", "k = 3");
        let path = write_tmp(dir.path(), "broken.toml", &broken);
        assert!(load_run_config(&path).is_err());
        assert!(load_run_config(&dir.path().join("missing.toml")).is_err());
    }

    /// A run config rewritten as one batch cell: subtables become
    /// `[cells.*]` so they attach to the enclosing array-of-tables entry.
    fn as_cell(run_toml: &str) -> String {
        let body = run_toml
            .replace("[lr]", "[cells.lr]")
            .replace("[data]", "[cells.data]")
            .replace("[model]", "[cells.model]")
            .replace("[attack]", "[cells.attack]");
        format!("[[cells]]\n{body}")
    }

    #[test]
    fn batch_loads_cells_and_rejects_collisions() {
        let dir = tempfile::tempdir().unwrap();
        let cell = as_cell(RUN_TOML);
        let other = as_cell(&RUN_TOML.replace("demo-lh", "demo-hh"));
        let path = write_tmp(dir.path(), "batch.toml", &format!("{cell}\n{other}"));
        let batch = load_batch_config(&path).unwrap();
        assert_eq!(batch.cells.len(), 2);
        assert_eq!(batch.cells[1].label, "demo-hh");

        let path = write_tmp(dir.path(), "collide.toml", &format!("{cell}\n{cell}"));
        let err = load_batch_config(&path).unwrap_err();
        assert!(format!("{err:#}").contains("duplicate"), "{err:#}");
    }

    #[test]
    fn theory_config_loads_and_checks() {
        let dir = tempfile::tempdir().unwrap();
        let text = r#"
dim = 10
distance_sq = 0.5
lipschitz = 1.0
delta = 0.01
noise = 0.1
epsilon = 0.1
epsilon_tilde = 0.01
batch = 1
epochs = 1
workers = 5
validators = 3
rounds = 50

[lr]
kind = "harmonic"
offset = 2.0
"#;
        let path = write_tmp(dir.path(), "theory.toml", text);
        let cfg = load_theory_config(&path).unwrap();
        assert_eq!(cfg, TheoryConfig::reference(50));
        // a constant rate of 1.0 violates the schedule conditions
        let bad = text.replace("kind = \"harmonic\"\noffset = 2.0", "kind = \"constant\"\nvalue = 1.0");
        let path = write_tmp(dir.path(), "bad.toml", &bad);
        assert!(load_theory_config(&path).is_err());
    }
}
