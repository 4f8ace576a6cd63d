//! Crate-wide error type.

use thiserror::Error;

/// Errors shared by the numerical layers and the model/estimation layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("drift matrix is not asymptotically stable (spectral margin {margin:.3e})")]
    UnstableSystem { margin: f64 },
    #[error("matrix is not positive semidefinite (min eigenvalue {min_eig:.3e})")]
    NotPsd { min_eig: f64 },
    #[error("spectra of the coefficient matrices overlap (min eigenvalue-sum {gap:.3e})")]
    SpectrumOverlap { gap: f64 },
    #[error("degenerate relaxation rates: {0}")]
    DegenerateRates(String),
    #[error("invalid times: {0}")]
    InvalidTimes(String),
    #[error("invalid observation scheme: {0}")]
    InvalidScheme(String),
    #[error("innovation covariance is numerically singular")]
    SingularInnovation,
    #[error("no equilibrium found: {0}")]
    NoEquilibrium(String),
    #[error("invalid spanning tree: {0}")]
    InvalidTree(String),
    #[error("graph is not connected")]
    InvalidGraph,
    #[error("sample times are not uniformly spaced")]
    NonUniform,
    #[error("too few frequency bins in the requested band")]
    InsufficientBand,
    #[error("optimization did not converge: {0}")]
    NoConvergence(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
