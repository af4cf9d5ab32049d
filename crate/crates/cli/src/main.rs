//! `poems`: train, evaluate and interpret gated product-of-experts multi-omics
//! models, generate synthetic data, benchmark the decoder and run self-checks.
//!
//! Exit codes: 0 success, 1 a verification or metric gate failed, 2 usage,
//! input or runtime error.

// Negated comparisons below are NaN-aware on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Outcome;
use config::{resolve, RunConfig};

#[derive(Parser)]
#[command(name = "poems", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for this command (training, synthesis, evaluation or benchmark).
    #[arg(long)]
    seed: Option<u64>,
    /// Override any config key, e.g. --set train.epochs=200. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_set)]
    set: Vec<(String, String)>,
}

fn parse_set(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write it with its history and resolved config.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        latent_dim: Option<usize>,
        /// Write and print the resolved config without loading data.
        #[arg(long)]
        dry_run: bool,
    },
    /// Cluster and classify the test-split embeddings of a trained model.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Model directory (default <out>/model).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Write biomarker, gating, correlation and latent reports.
    Interpret {
        #[command(flatten)]
        common: Common,
        /// Model directory (default <out>/model).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Generate a synthetic multi-omics dataset with planted sparse loadings.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Time the vectorized decoder against the per-feature reference.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        features: Option<usize>,
        #[arg(long)]
        latent_dim: Option<usize>,
        #[arg(long)]
        repetitions: Option<usize>,
    },
    /// Run the gradient, fusion, metric, prior and decoder self-checks.
    Check {
        /// Directory for check.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Dedicated flags become overrides applied after `--set`.
fn overrides(common: &Common, seed_key: &str, extra: &[(&str, Option<String>)]) -> Vec<(String, String)> {
    let mut v = common.set.clone();
    if let Some(out) = &common.out {
        v.push(("out".into(), out.display().to_string()));
    }
    if let Some(seed) = common.seed {
        v.push((seed_key.into(), seed.to_string()));
    }
    for (k, val) in extra {
        if let Some(val) = val {
            v.push((k.to_string(), val.clone()));
        }
    }
    v
}

fn some<T: ToString>(x: &Option<T>) -> Option<String> {
    x.as_ref().map(ToString::to_string)
}

/// Resolves the model directory before the stored snapshot is known.
fn analysis(common: &Common, model: &Option<PathBuf>, over: &[(String, String)]) -> poems_core::Result<PathBuf> {
    if let Some(m) = model {
        return Ok(m.clone());
    }
    let cfg: RunConfig = resolve(&[], common.config.as_deref(), over)?;
    Ok(cfg.model_dir())
}

fn run(cli: Cli) -> poems_core::Result<Outcome> {
    match cli.command {
        Command::Train {
            common,
            epochs,
            latent_dim,
            dry_run,
        } => {
            let over = overrides(
                &common,
                "train.seed",
                &[("train.epochs", some(&epochs)), ("train.latent_dim", some(&latent_dim))],
            );
            let cfg = resolve(&[], common.config.as_deref(), &over)?;
            if dry_run {
                commands::cmd_resolve(&cfg)
            } else {
                commands::cmd_train(&cfg)
            }
        }
        Command::Evaluate { common, model } => {
            let over = overrides(&common, "eval.seeds", &[]);
            let dir = analysis(&common, &model, &over)?;
            let (trained, cfg) = commands::load_for_analysis(&dir, common.config.as_deref(), &over)?;
            commands::cmd_evaluate(&trained, &cfg)
        }
        Command::Interpret { common, model, top_k } => {
            let over = overrides(&common, "interpret.seed", &[("interpret.top_k", some(&top_k))]);
            let dir = analysis(&common, &model, &over)?;
            let (trained, cfg) = commands::load_for_analysis(&dir, common.config.as_deref(), &over)?;
            commands::cmd_interpret(&trained, &cfg)
        }
        Command::Synth { common, samples } => {
            let over = overrides(&common, "synth.seed", &[("synth.samples", some(&samples))]);
            commands::cmd_synth(&resolve(&[], common.config.as_deref(), &over)?)
        }
        Command::Bench {
            common,
            samples,
            features,
            latent_dim,
            repetitions,
        } => {
            let over = overrides(
                &common,
                "bench.seed",
                &[
                    ("bench.samples", some(&samples)),
                    ("bench.features", some(&features)),
                    ("bench.latent_dim", some(&latent_dim)),
                    ("bench.repetitions", some(&repetitions)),
                ],
            );
            let cfg = resolve(&[], common.config.as_deref(), &over)?;
            commands::cmd_bench(&cfg, common.out.as_deref())
        }
        Command::Check { out } => commands::cmd_check(out.as_deref().map(Path::new)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(outcome) => {
            print!("{}", outcome.report);
            if outcome.failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                for f in &outcome.failures {
                    eprintln!("FAILED: {f}");
                }
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(2)
        }
    }
}
