//! Prior over chart coordinates. Because rates, frequencies, Λ diagonals
//! and measurement variances live in log space, independent log-normal
//! priors on them are plain Gaussians on θ entries, so the whole prior is
//! a product of independent Gaussians aligned with the chart.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::estimator::chart::ParamChart;

const LN_2PI: f64 = 1.8378770664093453;

/// Independent Gaussian prior on each chart coordinate.
#[derive(Debug, Clone)]
pub struct Prior {
    mean: DVector<f64>,
    sd: DVector<f64>,
}

impl Prior {
    pub fn new(mean: DVector<f64>, sd: DVector<f64>) -> Result<Self> {
        if mean.len() != sd.len() {
            return Err(Error::InvalidInput("prior mean/sd lengths differ".into()));
        }
        if sd.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidInput(
                "prior standard deviations must be positive (proper prior)".into(),
            ));
        }
        Ok(Self { mean, sd })
    }

    /// Weakly informative default: log-normal with median `rate_scale` and
    /// log-sd 2 on rates and frequencies, zero-mean Gaussians on free shape
    /// entries and Λ off-diagonals, log-normal on Λ diagonals around
    /// `amp_scale`, Gaussians on channel means around `mean_center`, and a
    /// broad log-normal on measurement variances around `noise_scale`.
    pub fn weakly_informative(
        chart: &ParamChart,
        rate_scale: f64,
        amp_scale: f64,
        mean_center: f64,
        mean_sd: f64,
        noise_scale: f64,
    ) -> Result<Self> {
        let (rates, shapes, lambda, means, noise) = chart.class_ranges();
        let dim = chart.dim();
        let mut mean = DVector::zeros(dim);
        let mut sd = DVector::from_element(dim, 2.0);

        let rate_scale = rate_scale.max(1e-12);
        for i in rates {
            mean[i] = rate_scale.ln();
            sd[i] = 2.0;
        }
        for i in shapes {
            mean[i] = 0.0;
            sd[i] = 2.0;
        }
        // Λ diagonal entries are logs; off-diagonals are raw with scale
        // comparable to the amplitude
        let n = chart.state_dim();
        let amp = amp_scale.max(1e-12);
        let mut at = lambda.start;
        for i in 0..n {
            for j in 0..=i {
                if i == j {
                    mean[at] = amp.ln();
                    sd[at] = 2.0;
                } else {
                    mean[at] = 0.0;
                    sd[at] = 2.0 * amp;
                }
                at += 1;
            }
        }
        for i in means {
            mean[i] = mean_center;
            sd[i] = mean_sd.max(1e-12);
        }
        for i in noise {
            mean[i] = noise_scale.max(1e-30).ln();
            sd[i] = 3.0;
        }
        Self::new(mean, sd)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Log density at θ.
    pub fn log_density(&self, theta: &DVector<f64>) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.mean.len() {
            let z = (theta[i] - self.mean[i]) / self.sd[i];
            acc += -0.5 * z * z - self.sd[i].ln() - 0.5 * LN_2PI;
        }
        acc
    }

    /// Per-coordinate prior precisions `1/sd²`.
    pub fn precision_diag(&self) -> DVector<f64> {
        DVector::from_fn(self.sd.len(), |i, _| 1.0 / (self.sd[i] * self.sd[i]))
    }

    /// Gradient of the log density at θ.
    pub fn log_density_grad(&self, theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.mean.len(), |i, _| {
            -(theta[i] - self.mean[i]) / (self.sd[i] * self.sd[i])
        })
    }
}
