//! Batch driver for boltzmix: configuration, verification suites,
//! simulations, sweeps and plot output.

use std::path::PathBuf;

use boltzmix::collision::CollisionError;
use boltzmix::diagnostics::DiagnosticsError;
use boltzmix::linearized::LinearizedError;
use boltzmix::model::ModelError;
use boltzmix::quadrature::QuadratureError;
use boltzmix::solver::SolverError;
use thiserror::Error;

pub mod app;
pub mod config;
pub mod plot;
pub mod simulate;
pub mod verify;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("{key}: {message}")]
    Invalid { key: String, message: String },
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("unknown parameter path {0:?}")]
    UnknownParameter(String),
    #[error("unknown suite {0:?} (expected identities, conservation, spectral, entropy or carleman)")]
    UnknownSuite(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error(transparent)]
    Collision(#[from] CollisionError),
    #[error(transparent)]
    Linearized(#[from] LinearizedError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
    #[error("plot output: {0}")]
    Plot(String),
    #[error("suite {0} failed; see the report")]
    VerifyFailed(String),
    #[error("worker pool: {0}")]
    Workers(String),
}

/// Runs `f` on a dedicated pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Workers(e.to_string()))?;
    Ok(pool.install(f))
}
