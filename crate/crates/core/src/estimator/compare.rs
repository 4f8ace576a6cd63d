//! Bayesian comparison over candidate mode counts: fit each candidate,
//! estimate its log marginal likelihood (Laplace, BIC fallback), and turn
//! equal model priors into posterior probabilities.

use crate::data::ChannelSample;
use crate::error::{Error, Result};
use crate::estimator::fit::{fit_mle, FitOptions, FitResult};
use crate::exec;

/// A candidate family: how many real and complex modes to fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Candidate {
    pub n_real: usize,
    pub n_complex: usize,
}

impl Candidate {
    pub fn state_dim(&self) -> usize {
        self.n_real + 2 * self.n_complex
    }
}

#[derive(Debug)]
pub struct CandidateResult {
    pub candidate: Candidate,
    pub fit: Result<FitResult>,
    /// Log marginal estimate used for the posterior (Laplace when
    /// available, otherwise BIC; `None` when the fit failed).
    pub log_z: Option<f64>,
    pub used_bic_fallback: bool,
    pub posterior: f64,
}

/// Posterior over the candidate list.
#[derive(Debug)]
pub struct ModelPosterior {
    pub candidates: Vec<CandidateResult>,
}

impl ModelPosterior {
    /// Posterior argmax with the Occam tie rule: within one nat of the top
    /// log marginal, prefer the smallest state dimension.
    pub fn best(&self) -> Option<&CandidateResult> {
        let top = self
            .candidates
            .iter()
            .filter_map(|c| c.log_z)
            .fold(f64::NEG_INFINITY, f64::max);
        if !top.is_finite() {
            return None;
        }
        self.candidates
            .iter()
            .filter(|c| c.log_z.map(|z| top - z <= 1.0).unwrap_or(false))
            .min_by_key(|c| (c.candidate.state_dim(), c.candidate.n_complex))
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::json!({
            "candidates": self.candidates.iter().map(|c| {
                serde_json::json!({
                    "n_real": c.candidate.n_real,
                    "n_complex": c.candidate.n_complex,
                    "log_z": c.log_z,
                    "bic": c.fit.as_ref().ok().map(|f| f.bic),
                    "laplace_log_z": c.fit.as_ref().ok().and_then(|f| f.laplace_log_z),
                    "used_bic_fallback": c.used_bic_fallback,
                    "posterior": c.posterior,
                    "log_evidence": c.fit.as_ref().ok().map(|f| f.log_evidence),
                    "error": c.fit.as_ref().err().map(|e| e.to_string()),
                })
            }).collect::<Vec<_>>(),
            "best": self.best().map(|c| serde_json::json!({
                "n_real": c.candidate.n_real,
                "n_complex": c.candidate.n_complex,
            })),
        })
    }
}

/// Fit every candidate (in parallel) and form posterior probabilities with
/// equal model priors. Candidate fits are seeded by family, so identical
/// candidates produce identical results.
pub fn compare_models(
    candidates: &[Candidate],
    n_channels: usize,
    samples: &[ChannelSample],
    opts: &FitOptions,
) -> Result<ModelPosterior> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no candidates to compare".into()));
    }

    let fits: Vec<Result<FitResult>> = exec::map_indexed(candidates.len(), |i| {
        let c = candidates[i];
        let mut o = opts.clone();
        // family-derived seed: identical families get identical fits
        o.seed = opts
            .seed
            .wrapping_add(1 + 31 * c.n_real as u64 + 1009 * c.n_complex as u64);
        fit_mle(c.n_real, c.n_complex, n_channels, samples, None, &o)
    });

    let mut results: Vec<CandidateResult> = candidates
        .iter()
        .zip(fits)
        .map(|(&candidate, fit)| {
            let (log_z, used_bic_fallback) = match &fit {
                Ok(f) => match f.laplace_log_z {
                    Some(z) => (Some(z), false),
                    None => (Some(f.bic_log_z()), true),
                },
                Err(_) => (None, false),
            };
            CandidateResult {
                candidate,
                fit,
                log_z,
                used_bic_fallback,
                posterior: 0.0,
            }
        })
        .collect();

    let top = results
        .iter()
        .filter_map(|r| r.log_z)
        .fold(f64::NEG_INFINITY, f64::max);
    if top.is_finite() {
        let mut total = 0.0;
        for r in &mut results {
            if let Some(z) = r.log_z {
                r.posterior = (z - top).exp();
                total += r.posterior;
            }
        }
        for r in &mut results {
            r.posterior /= total;
        }
    }
    Ok(ModelPosterior {
        candidates: results,
    })
}
