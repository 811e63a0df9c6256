//! Command-line surface.

use std::path::PathBuf;

use cfm_core::theory::Suite;
use clap::{Parser, Subcommand};

use crate::commands;
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "cfm-lab",
    version,
    about = "Train, sample, evaluate and verify consistency flow matching models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Draw samples from a checkpoint's EMA field.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Number of segments K.
        #[arg(long = "nfe-k")]
        nfe_k: usize,
        /// Euler steps per segment m.
        #[arg(long = "steps-per-segment")]
        steps_per_segment: usize,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write a 512x512 scatter plot.
        #[arg(long)]
        ppm: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Distill a single-segment student from a teacher checkpoint.
    Distill {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a group of numerical checks; exits 2 if any fails.
    Verify {
        /// lemma1, lemma2, theorem1, theorem2, corollary, continuity or all.
        #[arg(long)]
        suite: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a checkpoint at several NFE budgets.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "2,6,8")]
        nfe: Vec<usize>,
        #[arg(long, default_value_t = 512)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// JSON distribution spec; defaults to the checkpoint's target.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Caps rayon's pool from `CFM_LAB_THREADS` (unset or 0 means automatic).
pub fn configure_threads() -> Result<(), CliError> {
    let threads = match std::env::var("CFM_LAB_THREADS") {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| {
            CliError::Usage(format!("CFM_LAB_THREADS must be an integer, got {v:?}"))
        })?,
        Err(_) => 0,
    };
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    }
    Ok(())
}

/// Runs one command and returns the line printed on success.
pub fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Train { config } => {
            let out = commands::train(&RunConfig::load(&config)?)?;
            Ok(format!(
                "trained {} steps; checkpoint {}",
                out.checkpoint.meta.step,
                out.checkpoint_path.display()
            ))
        }
        Command::Distill { config } => {
            let out = commands::distill(&RunConfig::load(&config)?)?;
            Ok(format!(
                "distilled {} steps; checkpoint {}",
                out.checkpoint.meta.step,
                out.checkpoint_path.display()
            ))
        }
        Command::Sample {
            ckpt,
            nfe_k,
            steps_per_segment,
            n,
            out,
            ppm,
            seed,
        } => {
            let s = commands::cmd_sample(&ckpt, nfe_k, steps_per_segment, n, &out, ppm, seed)?;
            Ok(format!(
                "wrote {} samples at nfe {} to {}",
                s.points.rows(),
                s.nfe,
                out.display()
            ))
        }
        Command::Verify { suite, out, seed } => {
            let suite: Suite = suite
                .parse()
                .map_err(|e: cfm_core::Error| CliError::Usage(e.to_string()))?;
            let rows = commands::cmd_verify(suite, &out, seed)?;
            Ok(format!("{} checks passed", rows.len()))
        }
        Command::Eval {
            ckpt,
            nfe,
            n,
            out,
            dataset,
            seed,
        } => {
            let rows = commands::cmd_eval(&ckpt, dataset.as_deref(), &nfe, n, &out, seed)?;
            let summary: Vec<String> = rows
                .iter()
                .map(|r| format!("nfe {}: w2 {:.4}", r.nfe, r.w2))
                .collect();
            Ok(summary.join("\n"))
        }
    }
}
