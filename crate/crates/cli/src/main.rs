mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{ConfigError, Overrides};

#[derive(Parser)]
#[command(name = "lapaction", version, about = "One-vs-rest surgical action recognition pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field by dotted path, e.g. `trainer.batch_size=4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Comma-separated target actions.
    #[arg(long, global = true)]
    actions: Option<String>,
    /// Global random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Check the config, manifests and frame files.
    Validate,
    /// Tile annotated intervals into clips and build the one-vs-rest splits.
    ExtractClips,
    /// Augment target clips until each training split is balanced.
    Balance,
    /// Train one model per (head, action).
    Train,
    /// Score the test clips and write the metrics table.
    Evaluate,
    /// Sliding-window timelines over whole videos.
    Infer,
    /// Merge evaluate outputs into one comparison table.
    Report {
        /// `metrics.csv` files or evaluate directories.
        #[arg(long = "input")]
        inputs: Vec<PathBuf>,
    },
    /// Write the synthetic moving-dot videos and a matching config to `--out`.
    Fixture,
}

fn run(cli: Cli) -> Result<()> {
    let c = cli.common;
    if let Command::Fixture = cli.command {
        let out = c.out.context("fixture needs --out <dir>")?;
        commands::fixture(&out, c.seed.unwrap_or(7))?;
        return Ok(());
    }
    let path = c
        .config
        .ok_or_else(|| ConfigError::new("--config", "a config file is required"))?;
    let overrides = Overrides {
        set: c.set,
        actions: c.actions,
        seed: c.seed,
        out: c.out,
    };
    let config = config::load(&path, &overrides)?;
    match cli.command {
        Command::Validate => commands::validate(&config),
        Command::ExtractClips => commands::extract(&config),
        Command::Balance => commands::balance(&config),
        Command::Train => commands::train(&config),
        Command::Evaluate => commands::evaluate(&config),
        Command::Infer => commands::infer(&config),
        Command::Report { inputs } => commands::report(&config, &inputs),
        Command::Fixture => unreachable!("handled above"),
    }
}

/// The error chain, skipping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            if let Some(c) = err.downcast_ref::<ConfigError>() {
                eprintln!("config error: {c}");
            } else {
                eprintln!("error: {}", describe(&err));
            }
            ExitCode::from(1)
        }
    }
}
