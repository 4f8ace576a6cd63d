//! Linear stochastic process models and their covariance structure.
//!
//! An [`LtiSystem`] is the pair (A, K) of a stable drift matrix and a white
//! forcing covariance rate, optionally with a constant mean forcing. Its
//! stationary covariance solves the Lyapunov equation `A Σ + Σ A^T = -K`,
//! and the lagged covariance is `Σ e^{A^T τ}` for positive lags.

mod kernels;
mod modes;

pub use kernels::KernelParams;
pub use modes::{
    parameter_dimension, sym_expm, sym_logm, MeasNoise, ModeModel, ModeShapes, ModeSpec,
    OMEGA_MIN,
};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::matfun;

/// A stable continuous-time linear system driven by Gaussian white noise:
/// `dx/dt = A x + η`, `<η(s) η(t)^T> = K δ(t-s)`, `<η> = mean_forcing`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    a: DMatrix<f64>,
    k: DMatrix<f64>,
    mean_forcing: DVector<f64>,
}

impl LtiSystem {
    /// Build a zero-mean-forcing system; checks stability of `A` and that
    /// `K` is symmetric psd. A zero-dimensional system is allowed (used by
    /// the mode family with no modes).
    pub fn new(a: DMatrix<f64>, k: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        Self::with_mean_forcing(a, k, DVector::zeros(n))
    }

    pub fn with_mean_forcing(
        a: DMatrix<f64>,
        k: DMatrix<f64>,
        mean_forcing: DVector<f64>,
    ) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::InvalidInput("drift matrix must be square".into()));
        }
        let n = a.nrows();
        if k.nrows() != n || k.ncols() != n {
            return Err(Error::InvalidInput("K must match the drift dimension".into()));
        }
        if mean_forcing.len() != n {
            return Err(Error::InvalidInput(
                "mean forcing must match the drift dimension".into(),
            ));
        }
        if n > 0 {
            let st = matfun::is_stable(&a)?;
            if !st.stable {
                return Err(Error::UnstableSystem { margin: st.margin });
            }
            matfun::check_symmetric_psd("K", &k, 1e-10)?;
            if mean_forcing.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput("mean forcing must be finite".into()));
            }
        }
        Ok(Self { a, k, mean_forcing })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn drift(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn noise(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn mean_forcing(&self) -> &DVector<f64> {
        &self.mean_forcing
    }

    /// Stationary state mean `-A^{-1} mean_forcing`.
    pub fn mean_response(&self) -> DVector<f64> {
        if self.dim() == 0 {
            return DVector::zeros(0);
        }
        if self.mean_forcing.iter().all(|v| *v == 0.0) {
            return DVector::zeros(self.dim());
        }
        self.a
            .clone()
            .full_piv_lu()
            .solve(&(-&self.mean_forcing))
            .expect("stable drift is invertible")
    }

    /// Stationary covariance `Σ = ∫_0^∞ e^{A σ} K e^{A^T σ} dσ` via the
    /// Lyapunov solve.
    pub fn stationary_covariance(&self) -> Result<DMatrix<f64>> {
        if self.dim() == 0 {
            return Ok(DMatrix::zeros(0, 0));
        }
        matfun::solve_lyapunov(&self.a, &self.k)
    }

    /// Lagged covariance `C(τ) = <(x(t)-m)(x(t+τ)-m)^T>`: `Σ e^{A^T τ}` for
    /// `τ > 0`, `e^{A |τ|} Σ` for `τ < 0`, `Σ` at zero. Satisfies
    /// `C(-τ) = C(τ)^T`.
    pub fn lagged_covariance(&self, tau: f64) -> Result<DMatrix<f64>> {
        let sigma = self.stationary_covariance()?;
        if self.dim() == 0 || tau == 0.0 {
            return Ok(sigma);
        }
        if tau > 0.0 {
            Ok(&sigma * matfun::expm(&self.a, tau)?.transpose())
        } else {
            Ok(matfun::expm(&self.a, -tau)? * &sigma)
        }
    }

    /// Propagator and accumulated noise over a step, see
    /// [`matfun::van_loan_discretize`].
    pub fn discretize(&self, tau: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if self.dim() == 0 {
            return Ok((DMatrix::zeros(0, 0), DMatrix::zeros(0, 0)));
        }
        matfun::van_loan_discretize(&self.a, &self.k, tau)
    }
}
