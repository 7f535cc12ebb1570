use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use regvar_cli::{commands, parse_threads, thread_pool, CliError, ExperimentConfig, MethodName, THREADS_ENV};
use regvar_core::SyntheticTask;

#[derive(Parser)]
#[command(name = "regvar", version, about = "Regularization-variation uncertainty benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON experiment config; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Comma-separated method list, e.g. `map,ggn,regvar-amortized`.
    #[arg(long, global = true)]
    method: Option<String>,
    /// Comma-separated dataset list.
    #[arg(long, global = true)]
    dataset: Option<String>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Write the synthetic splits as CSV with metadata sidecars.
    GenData,
    /// Fit MAP networks with observation-variance selection.
    Train,
    /// Epistemic variances on the test inputs for each method.
    Variance,
    /// Metrics table for each method, dataset and seed.
    Evaluate,
    /// Full grid with summary and plot series.
    Benchmark,
    /// Sparsify the MAP by parameter uncertainty and measure test error.
    Sparsity,
    /// NLL over the lambda and rescale grids.
    LambdaSweep,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(l) = cli.lambda {
        cfg.lambda = l;
    }
    if let Some(m) = &cli.method {
        cfg.methods = m.split(',').map(str::parse).collect::<Result<Vec<MethodName>, _>>()?;
    }
    if let Some(d) = &cli.dataset {
        cfg.datasets = d
            .split(',')
            .map(|s| s.parse::<SyntheticTask>().map_err(|e| CliError::Config(e.to_string())))
            .collect::<Result<_, _>>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<PathBuf, CliError> {
    let cfg = resolve(cli)?;
    let threads = parse_threads(std::env::var(THREADS_ENV).ok().as_deref())?;
    let pool = thread_pool(threads)?;
    let out = &cli.out;
    pool.install(|| match cli.command {
        Command::GenData => commands::gen_data(&cfg, out),
        Command::Train => commands::train(&cfg, out),
        Command::Variance => commands::variance(&cfg, out),
        Command::Evaluate => commands::evaluate(&cfg, out),
        Command::Benchmark => commands::benchmark(&cfg, out),
        Command::Sparsity => commands::sparsity(&cfg, out),
        Command::LambdaSweep => commands::sweep(&cfg, out),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("regvar: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
