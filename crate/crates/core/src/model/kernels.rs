//! Closed-form stationary covariance kernels for the three scalar model
//! families, together with their state-space realizations. The closed forms
//! and the Lyapunov/exponential pipeline must agree; tests assert this.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::LtiSystem;

/// Relative tolerance below which the two FOU rates count as degenerate.
const FOU_DEGENERATE_RTOL: f64 = 1e-10;

/// Parameters of a closed-form scalar kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelParams {
    /// Ornstein–Uhlenbeck: `dx/dt = -mu x + sigma ξ`.
    Ou { mu: f64, sigma: f64 },
    /// Linear Langevin: `m x'' + beta x' + k x = sigma ξ`.
    Langevin {
        mass: f64,
        damping: f64,
        stiffness: f64,
        sigma: f64,
    },
    /// First-order filtered OU: `M f' = -gamma f + p`, `p' = -J p + sigma ξ`.
    Fou {
        mass: f64,
        damping: f64,
        relaxation: f64,
        sigma: f64,
    },
}

impl KernelParams {
    pub fn validate(&self) -> Result<()> {
        let all_positive = match *self {
            KernelParams::Ou { mu, sigma } => mu > 0.0 && sigma > 0.0,
            KernelParams::Langevin {
                mass,
                damping,
                stiffness,
                sigma,
            } => mass > 0.0 && damping > 0.0 && stiffness > 0.0 && sigma > 0.0,
            KernelParams::Fou {
                mass,
                damping,
                relaxation,
                sigma,
            } => mass > 0.0 && damping > 0.0 && relaxation > 0.0 && sigma > 0.0,
        };
        if !all_positive {
            return Err(Error::InvalidInput(
                "kernel parameters must be strictly positive".into(),
            ));
        }
        Ok(())
    }

    /// Evaluate the stationary covariance at lag `tau` (even in `tau`).
    pub fn eval(&self, tau: f64) -> Result<f64> {
        self.validate()?;
        let t = tau.abs();
        match *self {
            KernelParams::Ou { mu, sigma } => {
                Ok(sigma * sigma / (2.0 * mu) * (-mu * t).exp())
            }
            KernelParams::Langevin {
                mass: m,
                damping: beta,
                stiffness: k,
                sigma,
            } => {
                let s2 = sigma * sigma;
                let alpha = beta / (2.0 * m);
                let disc = beta * beta / 4.0 - m * k;
                if disc < 0.0 {
                    // underdamped
                    let omega = (-disc).sqrt() / m;
                    Ok(s2 / (2.0 * beta * k)
                        * (-alpha * t).exp()
                        * ((omega * t).cos() + alpha / omega * (omega * t).sin()))
                } else if disc > 0.0 {
                    // overdamped: two real decay rates
                    let eps = disc.sqrt() / m;
                    let lp = alpha + eps;
                    let lm = alpha - eps;
                    Ok(s2 / (4.0 * beta * k * eps) * (lp * (-lm * t).exp() - lm * (-lp * t).exp()))
                } else {
                    Ok(s2 / (2.0 * beta * k) * (-alpha * t).exp() * (1.0 + alpha * t))
                }
            }
            KernelParams::Fou {
                mass: m,
                damping: gamma,
                relaxation: j,
                sigma,
            } => {
                let cap_gamma = gamma / m;
                if (cap_gamma - j).abs() <= FOU_DEGENERATE_RTOL * cap_gamma.abs().max(j.abs()) {
                    return Err(Error::DegenerateRates(format!(
                        "FOU rates Γ={cap_gamma} and J={j} coincide; only the generic case is supported"
                    )));
                }
                let s2 = sigma * sigma;
                Ok(s2 / (2.0 * j * m * gamma * (cap_gamma * cap_gamma - j * j))
                    * (cap_gamma * (-j * t).exp() - j * (-cap_gamma * t).exp()))
            }
        }
    }

    /// State-space realization whose `(idx, idx)` lagged covariance equals
    /// [`KernelParams::eval`]; returns the system and the observed
    /// coordinate index.
    pub fn realize(&self) -> Result<(LtiSystem, usize)> {
        self.validate()?;
        match *self {
            KernelParams::Ou { mu, sigma } => {
                let sys = LtiSystem::new(
                    DMatrix::from_row_slice(1, 1, &[-mu]),
                    DMatrix::from_row_slice(1, 1, &[sigma * sigma]),
                )?;
                Ok((sys, 0))
            }
            KernelParams::Langevin {
                mass: m,
                damping: beta,
                stiffness: k,
                sigma,
            } => {
                let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -k / m, -beta / m]);
                let mut noise = DMatrix::zeros(2, 2);
                noise[(1, 1)] = sigma * sigma / (m * m);
                Ok((LtiSystem::new(a, noise)?, 0))
            }
            KernelParams::Fou {
                mass: m,
                damping: gamma,
                relaxation: j,
                sigma,
            } => {
                let a = DMatrix::from_row_slice(2, 2, &[-gamma / m, 1.0 / m, 0.0, -j]);
                let mut noise = DMatrix::zeros(2, 2);
                noise[(1, 1)] = sigma * sigma;
                Ok((LtiSystem::new(a, noise)?, 0))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const LAGS: [f64; 4] = [0.0, 0.1, 1.0, 10.0];

    fn assert_matches_realization(p: KernelParams, tol: f64) {
        let (sys, idx) = p.realize().unwrap();
        for tau in LAGS {
            let closed = p.eval(tau).unwrap();
            let pipeline = sys.lagged_covariance(tau).unwrap()[(idx, idx)];
            assert!(
                (closed - pipeline).abs() <= tol * closed.abs().max(1.0),
                "tau={tau}: closed {closed} vs pipeline {pipeline}"
            );
        }
    }

    #[test]
    fn ou_unit_variance_at_zero() {
        let p = KernelParams::Ou {
            mu: 1.0,
            sigma: std::f64::consts::SQRT_2,
        };
        assert_relative_eq!(p.eval(0.0).unwrap(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn ou_matches_realization() {
        assert_matches_realization(
            KernelParams::Ou {
                mu: 1.0,
                sigma: std::f64::consts::SQRT_2,
            },
            1e-12,
        );
    }

    #[test]
    fn langevin_critical_hand_value() {
        // m=1, β=2, k=1 is critically damped; σ²=4 gives C(1) = 2/e
        let p = KernelParams::Langevin {
            mass: 1.0,
            damping: 2.0,
            stiffness: 1.0,
            sigma: 2.0,
        };
        let v = p.eval(1.0).unwrap();
        assert_relative_eq!(v, 2.0 * (-1.0f64).exp(), max_relative = 1e-12);
        assert_relative_eq!(v, 0.73576, max_relative = 1e-4);
    }

    #[test]
    fn langevin_all_regimes_match_realization() {
        // underdamped, overdamped, critical
        assert_matches_realization(
            KernelParams::Langevin {
                mass: 1.0,
                damping: 0.4,
                stiffness: 4.0,
                sigma: 1.3,
            },
            1e-9,
        );
        assert_matches_realization(
            KernelParams::Langevin {
                mass: 1.0,
                damping: 5.0,
                stiffness: 1.0,
                sigma: 0.7,
            },
            1e-9,
        );
        assert_matches_realization(
            KernelParams::Langevin {
                mass: 1.0,
                damping: 2.0,
                stiffness: 1.0,
                sigma: 2.0,
            },
            1e-9,
        );
    }

    #[test]
    fn langevin_regime_boundary_continuity() {
        // perturb β²/4 − mk through zero; both branches approach the critical form
        let (m, k, sigma) = (1.0f64, 1.0f64, 1.5);
        let beta_crit = 2.0 * (m * k).sqrt();
        let critical = KernelParams::Langevin {
            mass: m,
            damping: beta_crit,
            stiffness: k,
            sigma,
        };
        for sign in [-1.0, 1.0] {
            let p = KernelParams::Langevin {
                mass: m,
                damping: beta_crit * (1.0 + sign * 1e-6),
                stiffness: k,
                sigma,
            };
            for tau in LAGS {
                let a = p.eval(tau).unwrap();
                let b = critical.eval(tau).unwrap();
                assert!(
                    (a - b).abs() <= 1e-4 * b.abs().max(1.0),
                    "sign={sign} tau={tau}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn fou_value_at_zero() {
        // M=1, γ=1 so Γ=1; variance is σ²/(2J(Γ+J))
        let j = std::f64::consts::E.powi(2);
        let p = KernelParams::Fou {
            mass: 1.0,
            damping: 1.0,
            relaxation: j,
            sigma: 1.0,
        };
        let expected = 1.0 / (2.0 * j * (1.0 + j));
        assert_relative_eq!(p.eval(0.0).unwrap(), expected, max_relative = 1e-12);
    }

    #[test]
    fn fou_matches_realization() {
        // figure parameters Γ=1/e, J=e²
        assert_matches_realization(
            KernelParams::Fou {
                mass: 1.0,
                damping: (-1.0f64).exp(),
                relaxation: std::f64::consts::E.powi(2),
                sigma: 1.0,
            },
            1e-9,
        );
    }

    #[test]
    fn fou_rejects_degenerate_rates() {
        let p = KernelParams::Fou {
            mass: 1.0,
            damping: 2.0,
            relaxation: 2.0,
            sigma: 1.0,
        };
        assert!(matches!(p.eval(0.5), Err(Error::DegenerateRates(_))));
    }

    #[test]
    fn fou_equals_overdamped_langevin_under_eigenvalue_matching() {
        // the FOU kernel is the overdamped Langevin kernel with decay rates
        // {Γ, J}; matching m=1, β=Γ+J, k=ΓJ and equal σ makes them identical
        let (cap_gamma, j, sigma) = ((-1.0f64).exp(), std::f64::consts::E.powi(2), 0.9);
        let fou = KernelParams::Fou {
            mass: 1.0,
            damping: cap_gamma,
            relaxation: j,
            sigma,
        };
        let langevin = KernelParams::Langevin {
            mass: 1.0,
            damping: cap_gamma + j,
            stiffness: cap_gamma * j,
            sigma,
        };
        for tau in LAGS {
            let f = fou.eval(tau).unwrap();
            let l = langevin.eval(tau).unwrap();
            assert!(
                (f - l).abs() <= 1e-9 * f.abs().max(1.0),
                "tau={tau}: fou {f} vs langevin {l}"
            );
        }
    }

    #[test]
    fn kernels_are_even_in_lag() {
        let p = KernelParams::Langevin {
            mass: 1.0,
            damping: 0.4,
            stiffness: 4.0,
            sigma: 1.0,
        };
        for tau in [0.3, 1.2, 4.5] {
            assert_relative_eq!(
                p.eval(tau).unwrap(),
                p.eval(-tau).unwrap(),
                max_relative = 1e-15
            );
        }
    }

    #[test]
    fn rejects_nonpositive_parameters() {
        let p = KernelParams::Ou {
            mu: -1.0,
            sigma: 1.0,
        };
        assert!(matches!(p.eval(0.0), Err(Error::InvalidInput(_))));
    }
}
