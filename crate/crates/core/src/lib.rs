//! Inference of dominant real and complex modes (damping rates, frequencies,
//! mode shapes and mode covariance) of linear stochastic processes from
//! streaming, irregularly sampled, partially observed time series.
//!
//! The crate is organized in layers:
//!
//! * [`matfun`] — dense small-matrix functions (exponential, Lyapunov and
//!   Sylvester solvers, Van Loan discretization, psd factorization).
//! * [`model`] — linear stochastic process models, closed-form kernels and
//!   the mode-ansatz model family.
//! * [`sim`] — exact simulation at arbitrary times and synthetic
//!   observation generation.
//! * [`kalman`] — the streaming filter: evidence recursion, discounted
//!   evidence rate and forward parameter sensitivities, constant cost per
//!   observation.
//! * [`estimator`] — parameter charts, batch maximum-likelihood fitting,
//!   streaming tracking and Bayesian model comparison.
//! * [`grid`] — the AC-network application: linearized swing dynamics with
//!   filtered-noise power imbalance and the skew-product joint system.
//! * [`spectral`] — periodogram utilities for validation and initialization.

pub mod data;
pub mod error;
pub mod estimator;
pub mod exec;
pub mod grid;
pub mod kalman;
pub mod matfun;
pub mod model;
pub mod sim;
pub mod spectral;

pub use error::{Error, Result};
