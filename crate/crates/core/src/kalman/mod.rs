//! Streaming Kalman filter over irregular times and partial observations,
//! with exact evidence accumulation and a discounted evidence rate.
//!
//! Prediction uses the exact Van Loan discretization, the covariance update
//! is in Joseph form, and the per-record evidence gain is
//! `ε_i = -1/2 (v_i^T F_i^{-1} v_i + log det F_i + d_i log 2π)`.
//! Each observation costs the same regardless of how many came before.

mod gradient;

pub use gradient::{
    batch_evidence_with_gradient, batch_fisher, init_stationary_with_grad, step_with_gradient,
    GradFilterState, GradStepOutput, ObsWithGrad, Propagators, SystemWithGrad,
};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::matfun::{self, symmetrize};
use crate::model::LtiSystem;

const LN_2PI: f64 = 1.8378770664093453;

/// One entry of an observation scheme: at time `t` the record observes
/// `y = Z x + offset + ξ` with `ξ ~ N(0, noise)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsSpec {
    pub t: f64,
    pub z: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub noise: DMatrix<f64>,
}

impl ObsSpec {
    pub fn new(t: f64, z: DMatrix<f64>, offset: DVector<f64>, noise: DMatrix<f64>) -> Result<Self> {
        let d = z.nrows();
        if d == 0 {
            return Err(Error::InvalidScheme("observation dimension is zero".into()));
        }
        if offset.len() != d || noise.nrows() != d || noise.ncols() != d {
            return Err(Error::InvalidScheme(format!(
                "inconsistent observation dimensions: Z is {}x{}, offset {}, noise {}x{}",
                z.nrows(),
                z.ncols(),
                offset.len(),
                noise.nrows(),
                noise.ncols()
            )));
        }
        if !t.is_finite() {
            return Err(Error::InvalidTimes(format!("non-finite time {t}")));
        }
        matfun::check_symmetric_psd("H", &noise, 1e-10)?;
        Ok(Self { t, z, offset, noise })
    }

    /// Selector rows picking raw coordinates `channels` of an `n`-dim state.
    pub fn selector(t: f64, channels: &[usize], n: usize, noise: DMatrix<f64>) -> Result<Self> {
        let mut z = DMatrix::zeros(channels.len(), n);
        for (row, &c) in channels.iter().enumerate() {
            if c >= n {
                return Err(Error::InvalidScheme(format!(
                    "channel {c} out of range for dimension {n}"
                )));
            }
            z[(row, c)] = 1.0;
        }
        Self::new(t, z, DVector::zeros(channels.len()), noise)
    }

    pub fn dim(&self) -> usize {
        self.z.nrows()
    }
}

/// An observation record: scheme entry plus the observed value.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub spec: ObsSpec,
    pub value: DVector<f64>,
}

impl Observation {
    pub fn new(spec: ObsSpec, value: DVector<f64>) -> Result<Self> {
        if value.len() != spec.dim() {
            return Err(Error::InvalidScheme(format!(
                "value has dimension {}, scheme expects {}",
                value.len(),
                spec.dim()
            )));
        }
        Ok(Self { spec, value })
    }
}

/// Stack records with exactly equal timestamps into single records, so that
/// the recursion sees strictly increasing times.
pub fn merge_simultaneous(observations: &[Observation]) -> Vec<Observation> {
    let mut out: Vec<Observation> = Vec::with_capacity(observations.len());
    for obs in observations {
        match out.last_mut() {
            Some(last) if last.spec.t == obs.spec.t => {
                let (d0, d1) = (last.spec.dim(), obs.spec.dim());
                let n = last.spec.z.ncols();
                let mut z = DMatrix::zeros(d0 + d1, n);
                z.view_mut((0, 0), (d0, n)).copy_from(&last.spec.z);
                z.view_mut((d0, 0), (d1, n)).copy_from(&obs.spec.z);
                let mut offset = DVector::zeros(d0 + d1);
                offset.rows_mut(0, d0).copy_from(&last.spec.offset);
                offset.rows_mut(d0, d1).copy_from(&obs.spec.offset);
                let mut noise = DMatrix::zeros(d0 + d1, d0 + d1);
                noise.view_mut((0, 0), (d0, d0)).copy_from(&last.spec.noise);
                noise.view_mut((d0, d0), (d1, d1)).copy_from(&obs.spec.noise);
                let mut value = DVector::zeros(d0 + d1);
                value.rows_mut(0, d0).copy_from(&last.value);
                value.rows_mut(d0, d1).copy_from(&obs.value);
                last.spec = ObsSpec {
                    t: last.spec.t,
                    z,
                    offset,
                    noise,
                };
                last.value = value;
            }
            _ => out.push(obs.clone()),
        }
    }
    out
}

/// Running filter state: last processed time, filtered mean and covariance,
/// cumulative evidence and the discounted evidence rate.
#[derive(Debug, Clone)]
pub struct FilterState {
    pub t_last: Option<f64>,
    pub x: DVector<f64>,
    pub p: DMatrix<f64>,
    pub evidence: f64,
    pub discounted: f64,
}

/// Per-step diagnostics: innovation, its covariance (after any jitter),
/// gain and the evidence gain.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub innovation: DVector<f64>,
    pub innovation_cov: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    pub evidence_gain: f64,
    pub jittered: bool,
}

/// Start from the stationary prior: mean response and stationary covariance,
/// zero evidence.
pub fn init_stationary(sys: &LtiSystem) -> Result<FilterState> {
    Ok(FilterState {
        t_last: None,
        x: sys.mean_response(),
        p: sys.stationary_covariance()?,
        evidence: 0.0,
        discounted: 0.0,
    })
}

/// The time-update over a gap `tau > 0`:
/// `x_pred = Φ (x - m) + m`, `P_pred = Φ P Φ^T + G`.
pub fn predict(
    state: &FilterState,
    sys: &LtiSystem,
    tau: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if !(tau > 0.0) {
        return Err(Error::InvalidTimes(format!(
            "prediction step must be positive, got {tau}"
        )));
    }
    let (phi, g) = sys.discretize(tau)?;
    let mean = sys.mean_response();
    let x_pred = &phi * (&state.x - &mean) + mean;
    let p_pred = symmetrize(&(&phi * &state.p * phi.transpose() + g));
    Ok((x_pred, p_pred))
}

pub(crate) struct InnovationFactor {
    pub chol: Cholesky<f64, Dyn>,
    pub f: DMatrix<f64>,
    pub log_det: f64,
    pub jittered: bool,
}

/// Factor the innovation covariance, adding `1e-12 tr(F)/d` of diagonal
/// jitter once if the plain factorization fails (H may legitimately be 0).
pub(crate) fn factor_innovation(f: &DMatrix<f64>) -> Result<InnovationFactor> {
    let mut jittered = false;
    let mut fm = symmetrize(f);
    let chol = match Cholesky::new(fm.clone()) {
        Some(c) => c,
        None => {
            jittered = true;
            let jitter = 1e-12 * fm.trace() / fm.nrows() as f64;
            for i in 0..fm.nrows() {
                fm[(i, i)] += jitter;
            }
            Cholesky::new(fm.clone()).ok_or(Error::SingularInnovation)?
        }
    };
    let mut log_det = 0.0;
    for i in 0..fm.nrows() {
        let d = chol.l_dirty()[(i, i)];
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::SingularInnovation);
        }
        log_det += 2.0 * d.ln();
    }
    Ok(InnovationFactor {
        chol,
        f: fm,
        log_det,
        jittered,
    })
}

/// Measurement update on a predicted pair; returns the filtered pair and
/// the step report. The covariance update is in Joseph form.
pub fn update(
    x_pred: &DVector<f64>,
    p_pred: &DMatrix<f64>,
    spec: &ObsSpec,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>, StepReport)> {
    let n = x_pred.len();
    if spec.z.ncols() != n || y.len() != spec.dim() {
        return Err(Error::InvalidScheme(format!(
            "observation dimensions do not match the state: Z is {}x{}, state {}",
            spec.z.nrows(),
            spec.z.ncols(),
            n
        )));
    }
    let d = spec.dim();

    let innovation = y - (&spec.z * x_pred + &spec.offset);
    let f_raw = &spec.z * p_pred * spec.z.transpose() + &spec.noise;
    let fac = factor_innovation(&f_raw)?;

    let f_inv_v = fac.chol.solve(&innovation);
    let quad = innovation.dot(&f_inv_v);
    let evidence_gain = -0.5 * (quad + fac.log_det + d as f64 * LN_2PI);

    // K = P Z^T F^{-1}
    let zp = &spec.z * p_pred;
    let gain = fac.chol.solve(&zp).transpose();

    let x_filt = x_pred + &gain * &innovation;
    let w = DMatrix::identity(n, n) - &gain * &spec.z;
    let p_filt = symmetrize(&(&w * p_pred * w.transpose() + &gain * &spec.noise * gain.transpose()));

    Ok((
        x_filt,
        p_filt,
        StepReport {
            innovation,
            innovation_cov: fac.f,
            gain,
            evidence_gain,
            jittered: fac.jittered,
        },
    ))
}

/// Process one record: predict over the gap, update, and accumulate the
/// evidence and the discounted evidence rate
/// `L̃_i = e^{-λ τ_i} L̃_{i-1} + ε_i`.
pub fn step(
    state: &mut FilterState,
    sys: &LtiSystem,
    obs: &Observation,
    forget: f64,
) -> Result<StepReport> {
    let tau = match state.t_last {
        None => 0.0,
        Some(t0) => {
            if obs.spec.t <= t0 {
                return Err(Error::InvalidTimes(format!(
                    "record at t={} is not after the last processed time {t0}",
                    obs.spec.t
                )));
            }
            obs.spec.t - t0
        }
    };
    let (x_pred, p_pred) = if tau > 0.0 {
        predict(state, sys, tau)?
    } else {
        (state.x.clone(), state.p.clone())
    };
    let (x_filt, p_filt, report) = update(&x_pred, &p_pred, &obs.spec, &obs.value)?;
    state.x = x_filt;
    state.p = p_filt;
    state.t_last = Some(obs.spec.t);
    state.evidence += report.evidence_gain;
    state.discounted = (-forget * tau).exp() * state.discounted + report.evidence_gain;
    Ok(report)
}

/// Fold the filter over a whole record sequence from the stationary prior;
/// returns the total evidence and the final state. Records with equal
/// timestamps are merged by stacking. Runtime is linear in the number of
/// records.
pub fn batch_evidence(sys: &LtiSystem, observations: &[Observation]) -> Result<(f64, FilterState)> {
    let mut state = init_stationary(sys)?;
    for obs in merge_simultaneous(observations) {
        step(&mut state, sys, &obs, 0.0)?;
    }
    Ok((state.evidence, state))
}

/// Dense Gaussian-process oracle for the same likelihood: builds the full
/// joint covariance of all observations from a lagged-covariance function
/// `state_cov(τ) = <(x(t)-m)(x(t+τ)-m)^T>` and evaluates the multivariate
/// normal log-density by a symmetric factorization. Cost is cubic in the
/// total observation dimension; intended for validation, not streaming.
pub fn dense_gp_loglik<F>(
    state_cov: F,
    state_mean: &DVector<f64>,
    observations: &[Observation],
) -> Result<f64>
where
    F: Fn(f64) -> Result<DMatrix<f64>>,
{
    if observations.is_empty() {
        return Ok(0.0);
    }
    let dims: Vec<usize> = observations.iter().map(|o| o.spec.dim()).collect();
    let total: usize = dims.iter().sum();
    let offsets: Vec<usize> = dims
        .iter()
        .scan(0usize, |acc, d| {
            let o = *acc;
            *acc += d;
            Some(o)
        })
        .collect();

    let mut cov = DMatrix::<f64>::zeros(total, total);
    let mut resid = DVector::<f64>::zeros(total);
    for (i, oi) in observations.iter().enumerate() {
        let mean_i = &oi.spec.z * state_mean + &oi.spec.offset;
        resid
            .rows_mut(offsets[i], dims[i])
            .copy_from(&(&oi.value - mean_i));
        for (j, oj) in observations.iter().enumerate() {
            if j < i {
                continue;
            }
            // Cov(y_i, y_j) = Z_i C(t_j - t_i) Z_j^T (+ H_i on the diagonal)
            let mut block = &oi.spec.z * state_cov(oj.spec.t - oi.spec.t)? * oj.spec.z.transpose();
            if i == j {
                block += &oi.spec.noise;
            }
            cov.view_mut((offsets[i], offsets[j]), (dims[i], dims[j]))
                .copy_from(&block);
            if i != j {
                cov.view_mut((offsets[j], offsets[i]), (dims[j], dims[i]))
                    .copy_from(&block.transpose());
            }
        }
    }

    let chol = Cholesky::new(symmetrize(&cov)).ok_or(Error::NotPsd { min_eig: f64::NAN })?;
    let mut log_det = 0.0;
    for i in 0..total {
        let d = chol.l_dirty()[(i, i)];
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NotPsd { min_eig: f64::NAN });
        }
        log_det += 2.0 * d.ln();
    }
    let quad = resid.dot(&chol.solve(&resid));
    Ok(-0.5 * (quad + log_det + total as f64 * LN_2PI))
}

/// Convenience oracle for an [`LtiSystem`]: dense likelihood with the
/// system's lagged covariance and mean response. The stationary covariance
/// is solved once and reused across all record pairs.
pub fn dense_gp_loglik_lti(sys: &LtiSystem, observations: &[Observation]) -> Result<f64> {
    let sigma = sys.stationary_covariance()?;
    let a = sys.drift();
    dense_gp_loglik(
        |tau| {
            if tau >= 0.0 {
                Ok(&sigma * matfun::expm(a, tau)?.transpose())
            } else {
                Ok(matfun::expm(a, -tau)? * &sigma)
            }
        },
        &sys.mean_response(),
        observations,
    )
}
