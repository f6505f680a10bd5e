//! `fedchain`: deterministic simulator for committee-validated federated
//! learning on a hash-linked chain.
//!
//! Exit codes: 0 success, 1 operational failure (a run diverged, a chain
//! failed verification, a check did not hold), 2 usage errors (bad flags,
//! missing or malformed config files).

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use fedchain_cli::config::{load_batch_config, load_run_config, load_theory_config, run_batch};
use fedchain_cli::convergence::check_convergence;
use fedchain_cli::report::emit_report;
use fedchain_core::analysis::{write_trace_csv, TheoryConfig};
use fedchain_core::chain::{load_chain, validate_chain};
use fedchain_core::protocol::RunSummary;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "fedchain",
    version,
    about = "Deterministic federated-learning chain simulator",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config over its listed seeds
    Run {
        /// TOML run config
        config: PathBuf,
        /// Directory to write results under
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Run only this master seed instead of the config's list
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every cell of a batch config, then write the report tables
    Batch {
        /// TOML batch config with [[cells]] entries
        config: PathBuf,
        /// Directory to write results under
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Verify a saved chain by recomputing every block
    Validate {
        /// Chain record file (chain.jsonl)
        chain: PathBuf,
        /// Weight sidecar; defaults to the chain path with extension `weights`
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Rebuild the report tables from an existing results directory
    Report {
        /// Directory previously populated by `run` or `batch`
        results: PathBuf,
    },
    /// Check the averaged instrumented run against the convergence bound
    ConvergenceCheck {
        /// TOML theory config; defaults to the built-in reference setup
        #[arg(long)]
        config: Option<PathBuf>,
        /// Rounds for the built-in reference config (ignored with --config)
        #[arg(long, default_value_t = 1000)]
        rounds: u64,
        /// Number of independent seeds to average
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Write the averaged trace to this CSV file
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

/// Failures split by exit code: usage problems exit 2, runtime problems 1.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

trait ExitClass<T> {
    fn usage(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T> ExitClass<T> for anyhow::Result<T> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(Failure::Usage)
    }
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(Failure::Runtime)
    }
}

fn summary_line(s: &RunSummary) -> String {
    let stopped = match s.stopped_at {
        Some(t) => format!("stopped at round {t}"),
        None => "hit the round limit".to_string(),
    };
    format!(
        "{}/{}/seed-{}: accuracy {:.4} over {} rounds ({}), tip {}",
        s.label,
        s.aggregator.name(),
        s.master_seed,
        s.final_accuracy,
        s.rounds_run,
        stopped,
        &s.tip_hash[..12.min(s.tip_hash.len())]
    )
}

fn dispatch(cli: Cli) -> Result<ExitCode, Failure> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let mut cfg = load_run_config(&config).usage()?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            let outcomes = run_batch(&[cfg], &out).runtime()?;
            for o in &outcomes {
                println!("{}", summary_line(&o.summary));
            }
            println!("results under {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Batch { config, out } => {
            let batch = load_batch_config(&config).usage()?;
            let outcomes = run_batch(&batch.cells, &out).runtime()?;
            for o in &outcomes {
                println!("{}", summary_line(&o.summary));
            }
            let files = emit_report(&out).runtime()?;
            println!("report tables: {}", files.join(" "));
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { chain, weights } => {
            if !chain.is_file() {
                return Err(Failure::Usage(anyhow!("no chain file at {}", chain.display())));
            }
            let weights = weights.unwrap_or_else(|| chain.with_extension("weights"));
            if !weights.is_file() {
                return Err(Failure::Usage(anyhow!(
                    "no weight sidecar at {}",
                    weights.display()
                )));
            }
            // a load failure is tampering (or corruption) caught early
            let loaded = match load_chain(&chain, &weights) {
                Ok(c) => c,
                Err(e) => {
                    println!("invalid: {e}");
                    return Ok(ExitCode::FAILURE);
                }
            };
            let result = validate_chain(&loaded);
            println!("{result}");
            if result.is_valid() {
                println!(
                    "{} blocks, tip {}",
                    loaded.blocks.len(),
                    fedchain_core::chain::hash_hex(&loaded.tip_hash())
                );
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Report { results } => {
            if !results.is_dir() {
                return Err(Failure::Usage(anyhow!(
                    "no results directory at {}",
                    results.display()
                )));
            }
            let files = emit_report(&results).runtime()?;
            println!("report tables: {}", files.join(" "));
            Ok(ExitCode::SUCCESS)
        }
        Command::ConvergenceCheck { config, rounds, seeds, trace } => {
            let cfg = match config {
                Some(path) => load_theory_config(&path).usage()?,
                None => {
                    let cfg = TheoryConfig::reference(rounds);
                    cfg.check().map_err(anyhow::Error::from).usage()?;
                    cfg
                }
            };
            let verdict = check_convergence(&cfg, seeds)
                .context("convergence run failed")
                .runtime()?;
            if let Some(path) = trace {
                write_trace_csv(&verdict.mean_trace, &path)
                    .map_err(anyhow::Error::from)
                    .runtime()?;
                println!("trace written to {}", path.display());
            }
            for line in verdict.lines() {
                println!("{line}");
            }
            Ok(if verdict.pass { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
