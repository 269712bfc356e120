use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the solver pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("quadrature did not converge: last relative change {rel_change:.3e} (target {rel_tol:.3e})")]
    QuadratureNonConvergence { rel_change: f64, rel_tol: f64 },

    #[error("kernel quadrature returned a non-positive value {value:e} at rho={rho}, z={z}")]
    NonPositiveKernel { value: f64, rho: f64, z: f64 },

    #[error("grid captures only {captured:.4} of the analytic mass (need >= {required})")]
    DegenerateMass { captured: f64, required: f64 },

    #[error("division underflow: denominator {value:e} at node {index}")]
    DivisionUnderflow { index: usize, value: f64 },

    #[error("sinkhorn did not converge at epsilon={epsilon} after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        epsilon: f64,
        iterations: usize,
        residual: f64,
        trace: Vec<f64>,
    },

    #[error("bridge endpoint mismatch at t={time}: L1 error {l1:.3e}")]
    EndpointMismatch { time: f64, l1: f64 },

    #[error("{exited} of {total} particles left the simulation box")]
    ParticlesEscaped { exited: usize, total: usize },

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
