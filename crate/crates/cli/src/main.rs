use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Single-component and sparse PLS estimators with bound audits.
#[derive(Parser)]
#[command(name = "plslab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit an estimator on a CSV dataset (header x1,...,xp,y).
    Fit(FitArgs),
    /// Run a Monte Carlo simulation from a config file.
    Simulate(RunArgs),
    /// Run a simulation and check coverage against 1 - delta at 3 sigma.
    Verify(RunArgs),
    /// Print every named constant as CSV (name,mode,value).
    Constants(ConstantsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    #[value(name = "pls_k")]
    PlsK,
    Single,
    Thresholded,
    Spls,
    Alt,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    estimator: EstimatorArg,
    /// Number of components (pls_k).
    #[arg(long)]
    k: Option<usize>,
    /// Noise standard deviation.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// Test parameter of the thresholded estimator.
    #[arg(long)]
    r: Option<f64>,
    /// Threshold override for the sparse estimators.
    #[arg(long)]
    mu: Option<f64>,
    /// Rescale columns so that diag(X'X/n) = 1.
    #[arg(long)]
    standardize: bool,
    /// Where to write the result record.
    #[arg(long, default_value = "fit_result.json")]
    output: PathBuf,
    #[arg(long, default_value = "fit")]
    run_id: String,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DesignArg {
    Identity,
    #[value(name = "rank_one")]
    RankOne,
    Ar1,
    Diagonal,
}

#[derive(Args)]
struct ConstantsArgs {
    #[arg(long)]
    delta: f64,
    #[arg(long, default_value_t = 0.5)]
    r: f64,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    p: usize,
    #[arg(long, value_enum, default_value = "identity")]
    design: DesignArg,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Comma-separated diagonal of Sigma.
    #[arg(long, value_delimiter = ',')]
    diagonal: Option<Vec<f64>>,
    #[arg(long)]
    normalize_columns: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(args) => commands::fit(args),
        Command::Simulate(args) => commands::simulate(args),
        Command::Verify(args) => commands::verify(args),
        Command::Constants(args) => commands::constants(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
