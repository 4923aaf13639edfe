mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] trendfuse::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// What a successful run concluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    CalibrationFailed,
}

#[derive(Debug, Parser)]
#[command(name = "trendfuse", version, about = "Hierarchical trend estimation from fragmentary study summaries")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for chains and replicates.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset and its generating truth.
    Simulate,
    /// Run the sampler and write draws plus a diagnostics sidecar.
    Fit(FitArgs),
    /// Predictions, aggregates, trends and the variance decomposition.
    Report(ReportArgs),
    /// Cross-validation, predictive checks and parameter recovery.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Add one chain on a fresh substream to the fit already in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    include_study_effect: bool,
    #[arg(long)]
    reference_age: Option<f64>,
    /// Also write SVG trend plots.
    #[arg(long)]
    svg: bool,
    /// Fit directory (defaults to the output directory).
    #[arg(long)]
    draws: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(long)]
    mask_fraction: Option<f64>,
    /// Comma-separated subset of crossval, ppc, recovery.
    #[arg(long, value_delimiter = ',')]
    checks: Option<Vec<String>>,
    #[arg(long)]
    replicates: Option<usize>,
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        if let Some(spec) = cfg.simulate.as_mut() {
            spec.seed = s;
        }
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = Some(j);
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    cfg.sampler.seed = cfg.seed;
    match &cli.command {
        Command::Report(a) => {
            cfg.report.include_study_effect |= a.include_study_effect;
            cfg.report.svg |= a.svg;
            if let Some(r) = a.reference_age {
                cfg.report.reference_age = r;
            }
            if let Some(d) = &a.draws {
                cfg.report.draws = Some(d.clone());
            }
        }
        Command::Validate(a) => {
            if let Some(m) = a.mask_fraction {
                cfg.validate.mask_fraction = m;
            }
            if let Some(c) = &a.checks {
                cfg.validate.checks = c.clone();
            }
            if let Some(r) = a.replicates {
                cfg.validate.replicates = r;
            }
        }
        _ => {}
    }
    if let Some(j) = cfg.jobs {
        if j == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        // fails only if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<Status, CliError> {
    let cfg = resolve(&cli)?;
    match cli.command {
        Command::Simulate => commands::simulate(&cfg),
        Command::Fit(a) => commands::fit(&cfg, a.resume),
        Command::Report(_) => commands::report(&cfg),
        Command::Validate(_) => commands::validate(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::CalibrationFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
