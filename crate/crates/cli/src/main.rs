//! `poppk`: population pharmacokinetic analysis from the command line.
//!
//! Every command reads one TOML config, writes flat-file artifacts plus a
//! `manifest.json` into the output directory, and exits with 0 (success),
//! 1 (analysis failure, artifacts still written) or 2 (usage error, nothing
//! written).

mod artifacts;
mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "poppk", version, about = "Population pharmacokinetic modelling engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the population model (FOCE-I) and write the parameter table.
    Fit(CommonArgs),
    /// Simulate a study dataset from the model.
    Simulate(CommonArgs),
    /// Nonparametric bootstrap of the final model.
    Bootstrap(CommonArgs),
    /// Visual predictive check.
    Vpc(CommonArgs),
    /// Stepwise covariate search (forward inclusion, backward elimination).
    CovariateSearch(CommonArgs),
    /// Per-subject exposures (AUC, Cmax, tmax, unbound Cmax) from EBEs.
    Exposures(CommonArgs),
    /// Goodness-of-fit table (PRED, IPRED, IWRES, CWRES) and shrinkage.
    Gof(CommonArgs),
    /// Compare parameters and exposures between outcome groups.
    CompareGroups(CommonArgs),
}

#[derive(Args, Clone)]
pub struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output` in the config.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Random seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads. Results do not depend on this value.
    #[arg(long)]
    threads: Option<usize>,
}

impl Command {
    fn parts(&self) -> (&'static str, &CommonArgs) {
        match self {
            Command::Fit(a) => ("fit", a),
            Command::Simulate(a) => ("simulate", a),
            Command::Bootstrap(a) => ("bootstrap", a),
            Command::Vpc(a) => ("vpc", a),
            Command::CovariateSearch(a) => ("covariate-search", a),
            Command::Exposures(a) => ("exposures", a),
            Command::Gof(a) => ("gof", a),
            Command::CompareGroups(a) => ("compare-groups", a),
        }
    }
}

fn run(cli: Cli) -> Result<Vec<String>, CliError> {
    let (name, args) = cli.command.parts();
    let mut config = RunConfig::load(&args.config)?;
    if let Some(out) = &args.output {
        config.output = Some(out.clone());
    }
    if let Some(seed) = args.seed {
        config.seed = Some(seed);
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Usage(format!("cannot start worker threads: {e}")))?;
    pool.install(|| commands::dispatch(name, &config))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(warnings) => {
            for w in warnings {
                eprintln!("warning: {w}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
