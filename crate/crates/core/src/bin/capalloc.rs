use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use capalloc::config::ExperimentConfig;
use capalloc::experiment::{self, ExperimentError, Overrides};
use capalloc::validate::{validate, Fault, ValidateOptions};

#[derive(Parser)]
#[command(name = "capalloc", version, about = "Capacity allocation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every analysis of a config.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Fit two single-architecture configs on their shared task and compare
    /// their capacity per lag.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Output directory (default: the output dir of `a`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the randomized invariant suite and print a JSON report.
    Validate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        instances: usize,
        #[arg(long, value_enum, default_value_t = FaultArg::None)]
        fault: FaultArg,
    },
    /// Compare fitted and optimal coefficients and autocovariances.
    Coeffs {
        config: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
}

#[derive(Args)]
struct OverrideArgs {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Relative gradient tolerance.
    #[arg(long)]
    tol: Option<f64>,
}

impl From<OverrideArgs> for Overrides {
    fn from(a: OverrideArgs) -> Self {
        Self {
            out_dir: a.out,
            seed: a.seed,
            restarts: a.restarts,
            max_iterations: a.max_iters,
            gradient_tolerance: a.tol,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    None,
    PerturbOrthonormality,
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode, ExperimentError> {
    match cmd {
        Command::Run { config, overrides } => {
            let m = experiment::run_file(&config, &overrides.into())?;
            for o in &m.outputs {
                println!("{}\t{:.2}s", o.file, o.seconds);
            }
        }
        Command::Coeffs { config, overrides } => {
            let m = experiment::coefficients(&config, &overrides.into())?;
            for o in &m.outputs {
                println!("{}\t{:.2}s", o.file, o.seconds);
            }
        }
        Command::Compare { a, b, out } => {
            let (ca, _) = ExperimentConfig::load(&a)?;
            let (cb, _) = ExperimentConfig::load(&b)?;
            let out = out.unwrap_or_else(|| ca.output.dir.clone());
            let c = experiment::compare(&ca, &cb, (&stem(&a), &stem(&b)), &out)?;
            println!("kappa {}={} {}={}", c.a, c.kappa_a, c.b, c.kappa_b);
        }
        Command::Validate {
            seed,
            instances,
            fault,
        } => {
            let report = validate(&ValidateOptions {
                seed,
                instances,
                fault: match fault {
                    FaultArg::None => Fault::None,
                    FaultArg::PerturbOrthonormality => Fault::PerturbOrthonormality,
                },
            });
            let text = serde_json::to_string_pretty(&report).map_err(|e| ExperimentError::Json(e.to_string()))?;
            println!("{text}");
            if !report.passed {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
