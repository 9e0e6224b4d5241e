//! `bearing`: dataset generation, training, featurization, evaluation,
//! navigation and reporting.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{Preset, RunConfig};
use crate::error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "bearing", version, about = "Cross-view UAV localization and waypoint navigation pipeline")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// TOML run configuration; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base configuration when no --config file is given.
    #[arg(long, global = true, value_enum, default_value = "desk")]
    preset: Preset,
    /// Seed for data sampling, model initialization, shuffling and episodes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run single-threaded.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cross-view dataset.
    Gen(commands::gen::GenArgs),
    /// Train the network on a generated dataset.
    Train(commands::train::TrainArgs),
    /// Precompute per-tile feature tables from a checkpoint.
    Featurize(commands::featurize::FeaturizeArgs),
    /// Evaluate a checkpoint on one dataset split.
    Eval(commands::eval::EvalArgs),
    /// Fly the benchmark routes with a pose estimator.
    Navigate(commands::navigate::NavigateArgs),
    /// Aggregate evaluation and navigation outputs into one summary.
    Report(commands::report::ReportArgs),
}

/// Toggles shared by `train` and anything that builds a model config.
#[derive(Args, Debug, Clone, Default)]
pub struct AblationArgs {
    /// Replace cluster aggregation by pooled features.
    #[arg(long)]
    no_gluf: bool,
    /// Drop the relative coordinate embeddings.
    #[arg(long)]
    no_rce: bool,
    /// Zero the similarity-guided coordinate.
    #[arg(long)]
    no_psg: bool,
    /// Zero the cross-attention output.
    #[arg(long)]
    no_ca: bool,
}

impl AblationArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.model.toggles;
        t.use_gluf &= !self.no_gluf;
        t.use_rce &= !self.no_rce;
        t.use_psg &= !self.no_psg;
        t.use_ca &= !self.no_ca;
    }
}

fn base_config(g: &GlobalArgs) -> CliResult<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::preset(g.preset),
    };
    if let Some(s) = g.seed {
        cfg.apply_seed(s);
    }
    Ok(cfg)
}

fn setup_threads(g: &GlobalArgs) -> CliResult<()> {
    let cap =
        match std::env::var("BEARING_NUM_THREADS") {
            Ok(v) => Some(v.parse::<usize>().ok().filter(|n| *n > 0).ok_or_else(|| {
                CliError::Usage(format!("BEARING_NUM_THREADS must be a positive integer, got {v:?}"))
            })?),
            Err(_) => None,
        };
    let threads = if g.deterministic { Some(1) } else { cap };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(CliError::other)?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    setup_threads(&cli.global)?;
    let cfg = base_config(&cli.global)?;
    match cli.command {
        Command::Gen(a) => commands::gen::run(cfg, a),
        Command::Train(a) => commands::train::run(cfg, a),
        Command::Featurize(a) => commands::featurize::run(cfg, a),
        Command::Eval(a) => commands::eval::run(cfg, a),
        Command::Navigate(a) => commands::navigate::run(cfg, a),
        Command::Report(a) => commands::report::run(cfg, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
