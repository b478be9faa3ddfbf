//! Command-line driver for the panel POMP engine.

// `!(x > 0.0)` style checks are meant to reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod ingest;
pub mod record;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::Context;
use config::RunConfig;
use error::{CliError, CliResult};
use record::RunRecord;

#[derive(Debug, Parser)]
#[command(name = "panelpomp", version, about = "Panel POMP inference for Daphnia mesocosm data")]
pub struct Cli {
    /// Run configuration (TOML), or a run_record.json to rerun.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate trajectories and quantile bands.
    Simulate,
    /// Panel log-likelihood and conditional log-likelihoods.
    Pfilter,
    /// Staged multi-start iterated filtering.
    Search,
    /// Profile searches over a grid of the focal parameter.
    Profile,
    /// Monte Carlo adjusted profile from saved profile points.
    Mcap,
    /// Negative binomial GLMM benchmarks.
    Benchmark,
    /// AIC table from run records.
    AicTable { records: Vec<PathBuf> },
    /// Score externally supplied mean trajectories.
    ScoreExternal,
}

impl Command {
    fn needs_config(&self) -> bool {
        !matches!(self, Command::AicTable { .. })
    }
}

pub fn run(cli: &Cli) -> CliResult<RunRecord> {
    let config = match &cli.config {
        Some(path) => {
            let mut cfg = RunConfig::load(path)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
                cfg.validate()?;
            }
            Some(cfg)
        }
        None if cli.command.needs_config() => return Err(CliError::Config("--config is required".into())),
        None => None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let ctx = Context {
        out_dir: config::out_dir(config.as_ref(), cli.out_dir.as_deref()),
        workers: pool.current_num_threads(),
        config,
    };
    pool.install(|| match &cli.command {
        Command::Simulate => commands::cmd_simulate(&ctx),
        Command::Pfilter => commands::cmd_pfilter(&ctx),
        Command::Search => commands::cmd_search(&ctx),
        Command::Profile => commands::cmd_profile(&ctx),
        Command::Mcap => commands::cmd_mcap(&ctx),
        Command::Benchmark => commands::cmd_benchmark(&ctx),
        Command::AicTable { records } => commands::cmd_aic_table(&ctx, records),
        Command::ScoreExternal => commands::cmd_score_external(&ctx),
    })
}
