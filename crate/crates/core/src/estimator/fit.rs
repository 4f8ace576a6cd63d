//! Batch maximum-posterior fitting: quasi-Newton ascent on the
//! unconstrained chart with multi-start initialization, plus Laplace and
//! BIC evidence estimates from the curvature at the optimum.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::data::ChannelSample;
use crate::error::{Error, Result};
use crate::estimator::chart::{MeanStructure, ParamChart};
use crate::estimator::init::{init_heuristic, InitOptions};
use crate::estimator::prior::Prior;
use crate::exec;
use crate::kalman::{batch_evidence_with_gradient, ObsWithGrad};
use crate::model::ModeModel;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Number of optimizer starts (first = spectral heuristic, rest
    /// jittered).
    pub starts: usize,
    pub max_iters: usize,
    /// Convergence threshold on the max-norm of the posterior gradient.
    pub grad_tol: f64,
    pub seed: u64,
    pub mean_structure: MeanStructure,
    pub fit_meas_noise: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            starts: 8,
            max_iters: 200,
            grad_tol: 1e-3,
            seed: 0,
            mean_structure: MeanStructure::Free,
            fit_meas_noise: true,
        }
    }
}

/// Outcome of a batch fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub chart: ParamChart,
    pub theta_hat: DVector<f64>,
    pub model: ModeModel,
    /// Data log-likelihood (total evidence) at the optimum.
    pub log_evidence: f64,
    /// Log posterior (evidence plus log prior) at the optimum.
    pub log_posterior: f64,
    /// Hessian of the log posterior at the optimum (finite differences of
    /// the analytic gradient).
    pub hessian: DMatrix<f64>,
    /// Posterior standard deviations from the inverse negative Hessian;
    /// NaN when the curvature is not negative definite.
    pub posterior_sd: Vec<f64>,
    /// Laplace estimate of the log marginal likelihood; `None` when the
    /// Hessian is not negative definite at the optimum.
    pub laplace_log_z: Option<f64>,
    /// Classic BIC, `p ln n - 2 L̂` (lower is better).
    pub bic: f64,
    /// Total scalar observation count backing the BIC.
    pub n_scalar_obs: usize,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    pub start_index: usize,
    pub warnings: Vec<String>,
}

impl FitResult {
    /// BIC recast as a log-marginal estimate, `L̂ - (p/2) ln n`.
    pub fn bic_log_z(&self) -> f64 {
        -0.5 * self.bic
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::json!({
            "theta_hat": self.theta_hat.iter().copied().collect::<Vec<f64>>(),
            "log_evidence": self.log_evidence,
            "log_posterior": self.log_posterior,
            "laplace_log_z": self.laplace_log_z,
            "bic": self.bic,
            "posterior_sd": self.posterior_sd,
            "converged": self.converged,
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "warnings": self.warnings,
            "model": self.model.to_json_value(),
        })
    }
}

/// Negative log posterior with its gradient; `Err` marks an infeasible θ.
pub(crate) fn neg_log_posterior(
    chart: &ParamChart,
    prior: &Prior,
    samples: &[ChannelSample],
    theta: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    let model = chart.unpack(theta)?;
    let grads = chart.grads(&model);
    let swg = chart.system_with_grad(&model, &grads)?;
    let records: Result<Vec<ObsWithGrad>> = samples
        .iter()
        .map(|s| chart.observation_with_grad(&model, &grads, s))
        .collect();
    let (l, dl, _) = batch_evidence_with_gradient(&swg, &records?)?;
    let lp = prior.log_density(theta);
    let gp = prior.log_density_grad(theta);
    let value = -(l + lp);
    if !value.is_finite() {
        return Err(Error::Numerical("objective is not finite".into()));
    }
    let grad = DVector::from_fn(theta.len(), |i, _| -(dl[i] + gp[i]));
    Ok((value, grad))
}

pub(crate) struct OptimOutcome {
    pub theta: DVector<f64>,
    pub nll: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// BFGS descent on the negative log posterior with Armijo backtracking.
/// Accepted steps never increase the objective.
pub(crate) fn minimize(
    chart: &ParamChart,
    prior: &Prior,
    samples: &[ChannelSample],
    theta0: &DVector<f64>,
    max_iters: usize,
    grad_tol: f64,
) -> Result<OptimOutcome> {
    let p = theta0.len();
    let mut theta = theta0.clone();
    let (mut f, mut g) = neg_log_posterior(chart, prior, samples, &theta)?;
    // initial inverse-Hessian scale: first trial step about 0.1 in θ
    let h_scale = (0.1 / g.amax().max(1e-12)).min(1.0);
    let mut h_inv = DMatrix::<f64>::identity(p, p) * h_scale;
    let mut first_update = true;
    let mut iterations = 0;
    let mut stalls = 0usize;

    while iterations < max_iters {
        let g_inf = g.amax();
        if g_inf < grad_tol {
            return Ok(OptimOutcome {
                theta,
                nll: f,
                grad_norm: g_inf,
                iterations,
                converged: true,
            });
        }
        let mut dir = -(&h_inv * &g);
        if dir.dot(&g) >= 0.0 {
            h_inv = DMatrix::identity(p, p) * h_scale;
            dir = -(&h_inv * &g);
        }

        // backtracking line search
        let slope = dir.dot(&g);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand = &theta + alpha * &dir;
            match neg_log_posterior(chart, prior, samples, &cand) {
                Ok((fc, gc)) if fc <= f + 1e-4 * alpha * slope => {
                    accepted = Some((cand, fc, gc, alpha));
                    break;
                }
                _ => alpha *= 0.5,
            }
        }
        let Some((cand, fc, gc, alpha)) = accepted else {
            // no admissible step along this direction
            return Ok(OptimOutcome {
                theta,
                nll: f,
                grad_norm: g_inf,
                iterations,
                converged: g_inf < 10.0 * grad_tol,
            });
        };
        assert!(fc <= f + 1e-9 * (1.0 + f.abs()), "line search accepted an ascent step");

        let s = alpha * &dir;
        let y = &gc - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if first_update {
                // standard curvature-matched rescale before the first update
                h_inv = DMatrix::identity(p, p) * (sy / y.dot(&y));
                first_update = false;
            }
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(p, p);
            let left = &eye - rho * (&s * y.transpose());
            h_inv = &left * h_inv * left.transpose() + rho * (&s * s.transpose());
        }

        if (f - fc).abs() < 1e-10 * (1.0 + f.abs()) {
            stalls += 1;
        } else {
            stalls = 0;
        }
        theta = cand;
        f = fc;
        g = gc;
        iterations += 1;
        if stalls >= 3 {
            break;
        }
    }
    let g_inf = g.amax();
    Ok(OptimOutcome {
        theta,
        nll: f,
        grad_norm: g_inf,
        iterations,
        converged: g_inf < grad_tol,
    })
}

/// Gauss–Newton Hessian of the log posterior: the expected information of
/// the evidence plus the prior curvature, negated. One filter pass; always
/// negative definite.
pub(crate) fn posterior_hessian(
    chart: &ParamChart,
    prior: &Prior,
    samples: &[ChannelSample],
    theta: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let model = chart.unpack(theta)?;
    let grads = chart.grads(&model);
    let swg = chart.system_with_grad(&model, &grads)?;
    let records: Result<Vec<ObsWithGrad>> = samples
        .iter()
        .map(|s| chart.observation_with_grad(&model, &grads, s))
        .collect();
    let mut fisher = crate::kalman::batch_fisher(&swg, &records?)?;
    let prec = prior.precision_diag();
    for i in 0..theta.len() {
        fisher[(i, i)] += prec[i];
    }
    Ok(-fisher)
}

/// Default weakly informative prior scaled from the data: rates around the
/// inverse record span … Nyquist midpoint, amplitudes around the sample
/// standard deviation, means around the sample mean.
pub fn default_prior(chart: &ParamChart, samples: &[ChannelSample]) -> Result<Prior> {
    let mut all: Vec<f64> = Vec::new();
    let mut tmin = f64::INFINITY;
    let mut tmax = f64::NEG_INFINITY;
    for s in samples {
        all.extend_from_slice(&s.values);
        tmin = tmin.min(s.t);
        tmax = tmax.max(s.t);
    }
    let n = all.len().max(1) as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let span = (tmax - tmin).max(1e-6);
    let median_dt = span / samples.len().max(2) as f64;
    // geometric midpoint of the resolvable rate range
    let rate_scale = ((2.0 * std::f64::consts::PI / span)
        * (std::f64::consts::PI / median_dt))
        .sqrt();
    Prior::weakly_informative(
        chart,
        rate_scale,
        var.sqrt().max(1e-6),
        mean,
        (3.0 * var.sqrt()).max(1e-3),
        (0.05 * var).max(1e-8),
    )
}

/// Fit `n_real` real and `n_complex` complex modes to the samples by
/// multi-start quasi-Newton ascent of the log posterior.
pub fn fit_mle(
    n_real: usize,
    n_complex: usize,
    n_channels: usize,
    samples: &[ChannelSample],
    prior: Option<&Prior>,
    opts: &FitOptions,
) -> Result<FitResult> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no data to fit".into()));
    }
    let samples = crate::data::sort_and_merge(samples);
    let mut warnings = Vec::new();

    let (init_model, init_warnings) = init_heuristic(
        &samples,
        n_channels,
        n_real,
        n_complex,
        &InitOptions {
            seed: opts.seed,
            ..InitOptions::default()
        },
    )?;
    warnings.extend(init_warnings);

    let chart = ParamChart::for_model(&init_model, opts.mean_structure, opts.fit_meas_noise)?;
    let owned_prior;
    let prior = match prior {
        Some(p) => {
            if p.dim() != chart.dim() {
                return Err(Error::InvalidInput(format!(
                    "prior has dimension {}, chart {}",
                    p.dim(),
                    chart.dim()
                )));
            }
            p
        }
        None => {
            owned_prior = default_prior(&chart, &samples)?;
            &owned_prior
        }
    };

    let n_scalar_obs: usize = samples.iter().map(|s| s.values.len()).sum();
    if chart.dim() >= n_scalar_obs {
        warnings.push(format!(
            "parameter dimension {} is not below the total observation dimension {n_scalar_obs}",
            chart.dim()
        ));
    }

    let theta0 = chart.pack(&init_model)?;
    // jitter magnitudes per class: rates wander in log space, shapes and
    // the rest more conservatively
    let starts: Vec<DVector<f64>> = (0..opts.starts.max(1))
        .map(|s| {
            if s == 0 {
                theta0.clone()
            } else {
                use rand::Rng;
                use rand::SeedableRng;
                let mut rng =
                    rand_chacha::ChaCha12Rng::seed_from_u64(opts.seed ^ (0xC0FFEE + s as u64));
                let (rates, shapes, lambda, means, noise) = chart.class_ranges();
                DVector::from_fn(chart.dim(), |i, _| {
                    let scale = if rates.contains(&i) {
                        0.5
                    } else if shapes.contains(&i) {
                        0.3
                    } else if lambda.contains(&i) {
                        0.3
                    } else if means.contains(&i) || noise.contains(&i) {
                        0.1
                    } else {
                        0.1
                    };
                    theta0[i] + rng.random_range(-scale..scale)
                })
            }
        })
        .collect();

    let outcomes: Vec<Result<OptimOutcome>> = exec::map_indexed(starts.len(), |s| {
        minimize(
            &chart,
            prior,
            &samples,
            &starts[s],
            opts.max_iters,
            opts.grad_tol,
        )
    });

    let mut best: Option<(usize, OptimOutcome)> = None;
    let mut failures = Vec::new();
    for (s, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(o) => {
                if best.as_ref().map(|(_, b)| o.nll < b.nll).unwrap_or(true) {
                    best = Some((s, o));
                }
            }
            Err(e) => failures.push(format!("start {s}: {e}")),
        }
    }
    let Some((start_index, out)) = best else {
        return Err(Error::NoConvergence(format!(
            "all {} starts failed: {}",
            starts.len(),
            failures.join("; ")
        )));
    };
    if !failures.is_empty() {
        warnings.push(format!("failed starts: {}", failures.join("; ")));
    }

    let theta_hat = out.theta;
    let model = chart.unpack(&theta_hat)?.canonicalize()?;
    // re-pack through the canonical ordering so reported θ matches the
    // model; the per-class prior is permutation invariant, so it carries over
    let chart = ParamChart::for_model(&model, opts.mean_structure, opts.fit_meas_noise)?;
    let theta_hat = chart.pack(&model)?;

    let (nll, grad) = neg_log_posterior(&chart, prior, &samples, &theta_hat)?;
    let log_posterior = -nll;
    let log_prior = prior.log_density(&theta_hat);
    let log_evidence = log_posterior - log_prior;

    let hessian = posterior_hessian(&chart, prior, &samples, &theta_hat)?;
    let p = chart.dim();
    let neg_h = -&hessian;
    let (laplace_log_z, posterior_sd) = match Cholesky::new(neg_h.clone()) {
        Some(chol) => {
            let mut log_det = 0.0;
            for i in 0..p {
                log_det += 2.0 * chol.l_dirty()[(i, i)].ln();
            }
            let cov = chol.inverse();
            let sd: Vec<f64> = (0..p).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
            (
                Some(log_posterior + 0.5 * p as f64 * LN_2PI - 0.5 * log_det),
                sd,
            )
        }
        None => {
            warnings.push(
                "posterior Hessian is not negative definite; Laplace evidence unavailable"
                    .to_string(),
            );
            (None, vec![f64::NAN; p])
        }
    };
    let bic = p as f64 * (n_scalar_obs as f64).ln() - 2.0 * log_evidence;

    Ok(FitResult {
        chart,
        theta_hat,
        model,
        log_evidence,
        log_posterior,
        hessian,
        posterior_sd,
        laplace_log_z,
        bic,
        n_scalar_obs,
        converged: out.converged,
        iterations: out.iterations,
        grad_norm: grad.amax().min(out.grad_norm),
        start_index,
        warnings,
    })
}
