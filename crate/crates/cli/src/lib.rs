//! Experiment driver for the `regvar` binary: configuration, the
//! method x dataset x seed grid, sparsity and lambda sweeps, and the
//! deterministic CSV/JSON outputs.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod output;

pub use config::{ExperimentConfig, MethodName, TrainConfig, SCHEMA_VERSION};
pub use error::CliError;

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "REGVAR_THREADS";

/// Parses a `REGVAR_THREADS` value. `None` leaves the pool at its default size.
pub fn parse_threads(value: Option<&str>) -> Result<Option<usize>, CliError> {
    match value.map(str::trim) {
        None | Some("") => Ok(None),
        Some(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
    }
}

/// Builds the worker pool. The default size is capped by `REGVAR_THREADS` when set.
pub fn thread_pool(cap: Option<usize>) -> Result<rayon::ThreadPool, CliError> {
    let threads = cap.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("cannot build worker pool: {e}")))
}
