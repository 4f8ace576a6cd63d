//! Forward parameter sensitivities for the evidence recursion: one linear
//! recursion per parameter, run alongside the filter, so gradients stream
//! with the same constant cost per observation.
//!
//! The derivative of the propagator pair (Φ, G) with respect to a parameter
//! is read off the top-right block of `exp([[M, M'], [0, M]] τ)` where `M`
//! is the Van Loan augmented matrix; entries are cached per distinct step
//! so regularly spaced records pay for the exponentials once.

use std::cell::RefCell;
use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kalman::{factor_innovation, FilterState, Observation, StepReport};
use crate::matfun::{expm_unchecked, symmetrize};
use crate::model::LtiSystem;

/// Propagator pair and its parameter derivatives for one step size.
#[derive(Debug, Clone)]
pub struct Propagators {
    pub phi: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub d_phi: Vec<DMatrix<f64>>,
    pub d_g: Vec<DMatrix<f64>>,
}

/// A system together with the derivatives of its drift and noise matrices
/// with respect to each fitted parameter, plus a per-step propagator cache.
pub struct SystemWithGrad {
    sys: LtiSystem,
    d_drift: Vec<DMatrix<f64>>,
    d_noise: Vec<DMatrix<f64>>,
    mean: DVector<f64>,
    d_mean: Vec<DVector<f64>>,
    cache: RefCell<HashMap<u64, Propagators>>,
}

impl SystemWithGrad {
    pub fn new(
        sys: LtiSystem,
        d_drift: Vec<DMatrix<f64>>,
        d_noise: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let n = sys.dim();
        if d_drift.len() != d_noise.len() {
            return Err(Error::InvalidInput(
                "drift and noise derivative lists must have equal length".into(),
            ));
        }
        for m in d_drift.iter().chain(d_noise.iter()) {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::InvalidInput(
                    "parameter derivative matrices must match the state dimension".into(),
                ));
            }
        }
        let mean = sys.mean_response();
        // A μ = -mean_forcing with parameter-independent forcing gives
        // dμ = -A^{-1} A' μ
        let d_mean = if mean.iter().all(|v| *v == 0.0) {
            vec![DVector::zeros(n); d_drift.len()]
        } else {
            let lu = sys.drift().clone().full_piv_lu();
            d_drift
                .iter()
                .map(|da| {
                    lu.solve(&(-(da * &mean)))
                        .expect("stable drift is invertible")
                })
                .collect()
        };
        Ok(Self {
            sys,
            d_drift,
            d_noise,
            mean,
            d_mean,
            cache: RefCell::new(HashMap::new()),
        })
    }

    pub fn system(&self) -> &LtiSystem {
        &self.sys
    }

    pub fn n_params(&self) -> usize {
        self.d_drift.len()
    }

    /// (Φ, G) and their parameter derivatives for step `tau`, cached.
    pub fn propagators(&self, tau: f64) -> Propagators {
        if let Some(hit) = self.cache.borrow().get(&tau.to_bits()) {
            return hit.clone();
        }
        let computed = self.compute_propagators(tau);
        self.cache
            .borrow_mut()
            .insert(tau.to_bits(), computed.clone());
        computed
    }

    fn compute_propagators(&self, tau: f64) -> Propagators {
        let n = self.sys.dim();
        let p = self.n_params();
        if n == 0 {
            return Propagators {
                phi: DMatrix::zeros(0, 0),
                g: DMatrix::zeros(0, 0),
                d_phi: vec![DMatrix::zeros(0, 0); p],
                d_g: vec![DMatrix::zeros(0, 0); p],
            };
        }

        // Van Loan augmented matrix and its parameter directions
        let mut m = DMatrix::<f64>::zeros(2 * n, 2 * n);
        m.view_mut((0, 0), (n, n)).copy_from(self.sys.drift());
        m.view_mut((0, n), (n, n)).copy_from(self.sys.noise());
        m.view_mut((n, n), (n, n))
            .copy_from(&(-self.sys.drift().transpose()));

        let norm: f64 = (0..2 * n)
            .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let doublings = if norm * tau > 2.0 {
            (norm * tau / 2.0).log2().ceil() as u32
        } else {
            0
        };
        let sub = tau / 2f64.powi(doublings as i32);

        let e = expm_unchecked(&(&m * sub));
        let mut phi = e.view((0, 0), (n, n)).into_owned();
        let mut top_right = e.view((0, n), (n, n)).into_owned();
        let mut g = symmetrize(&(&top_right * phi.transpose()));

        let mut d_phi = Vec::with_capacity(p);
        let mut d_g = Vec::with_capacity(p);
        for j in 0..p {
            let mut dm = DMatrix::<f64>::zeros(2 * n, 2 * n);
            dm.view_mut((0, 0), (n, n)).copy_from(&self.d_drift[j]);
            dm.view_mut((0, n), (n, n)).copy_from(&self.d_noise[j]);
            dm.view_mut((n, n), (n, n))
                .copy_from(&(-self.d_drift[j].transpose()));

            // Frechet derivative via the block-augmented exponential
            let mut aug = DMatrix::<f64>::zeros(4 * n, 4 * n);
            aug.view_mut((0, 0), (2 * n, 2 * n)).copy_from(&(&m * sub));
            aug.view_mut((0, 2 * n), (2 * n, 2 * n))
                .copy_from(&(&dm * sub));
            aug.view_mut((2 * n, 2 * n), (2 * n, 2 * n))
                .copy_from(&(&m * sub));
            let big = expm_unchecked(&aug);
            let de = big.view((0, 2 * n), (2 * n, 2 * n));
            let dphi_j = de.view((0, 0), (n, n)).into_owned();
            let dtr_j = de.view((0, n), (n, n)).into_owned();
            let dg_j =
                symmetrize(&(&dtr_j * phi.transpose() + &top_right * dphi_j.transpose()));
            d_phi.push(dphi_j);
            d_g.push(dg_j);
        }

        for _ in 0..doublings {
            for j in 0..p {
                d_g[j] = symmetrize(
                    &(&d_phi[j] * &g * phi.transpose()
                        + &phi * &g * d_phi[j].transpose()
                        + &phi * &d_g[j] * phi.transpose()
                        + &d_g[j]),
                );
                d_phi[j] = &d_phi[j] * &phi + &phi * &d_phi[j];
            }
            g = symmetrize(&(&phi * &g * phi.transpose() + &g));
            phi = &phi * &phi;
            top_right = DMatrix::zeros(0, 0); // no longer meaningful
        }
        let _ = top_right;

        Propagators { phi, g, d_phi, d_g }
    }
}

/// An observation record with the derivatives of its selector, offset and
/// noise with respect to each fitted parameter. Empty derivative lists mean
/// all-zero derivatives.
#[derive(Debug, Clone)]
pub struct ObsWithGrad {
    pub obs: Observation,
    pub d_z: Vec<DMatrix<f64>>,
    pub d_offset: Vec<DVector<f64>>,
    pub d_noise: Vec<DMatrix<f64>>,
}

impl ObsWithGrad {
    /// Record whose scheme does not depend on any parameter.
    pub fn constant(obs: Observation, n_params: usize) -> Self {
        let d = obs.spec.dim();
        let n = obs.spec.z.ncols();
        Self {
            obs,
            d_z: vec![DMatrix::zeros(d, n); n_params],
            d_offset: vec![DVector::zeros(d); n_params],
            d_noise: vec![DMatrix::zeros(d, d); n_params],
        }
    }
}

/// Filter state extended with per-parameter sensitivities of the mean, the
/// covariance, the evidence and the discounted evidence rate.
#[derive(Debug, Clone)]
pub struct GradFilterState {
    pub base: FilterState,
    pub d_x: Vec<DVector<f64>>,
    pub d_p: Vec<DMatrix<f64>>,
    pub d_evidence: Vec<f64>,
    pub d_discounted: Vec<f64>,
}

/// Stationary prior and its parameter derivatives. The covariance
/// derivative solves the differentiated Lyapunov equation
/// `A Σ' + Σ' A^T = -(K' + A' Σ + Σ A'^T)`.
pub fn init_stationary_with_grad(swg: &SystemWithGrad) -> Result<GradFilterState> {
    let base = crate::kalman::init_stationary(swg.system())?;
    let p = swg.n_params();
    let n = swg.system().dim();
    let mut d_p = Vec::with_capacity(p);
    for j in 0..p {
        if n == 0 {
            d_p.push(DMatrix::zeros(0, 0));
            continue;
        }
        let rhs = &swg.d_noise[j]
            + &swg.d_drift[j] * &base.p
            + &base.p * swg.d_drift[j].transpose();
        d_p.push(crate::matfun::solve_lyapunov_symmetric(
            swg.system().drift(),
            &symmetrize(&rhs),
        )?);
    }
    Ok(GradFilterState {
        base,
        d_x: swg.d_mean.clone(),
        d_p,
        d_evidence: vec![0.0; p],
        d_discounted: vec![0.0; p],
    })
}

/// Per-record outputs of [`step_with_gradient`]: filter diagnostics, the
/// evidence-gain derivatives `∂ε/∂θ`, and the diagonal of the per-record
/// Fisher information `dv^T F^{-1} dv + 1/2 tr(F^{-1} dF F^{-1} dF)`.
#[derive(Debug, Clone)]
pub struct GradStepOutput {
    pub report: StepReport,
    pub d_eps: Vec<f64>,
    pub info_diag: Vec<f64>,
}

/// One filter step carrying the sensitivity recursion; returns the step
/// report, the per-parameter evidence-gain derivatives and the information
/// diagonal.
pub fn step_with_gradient(
    state: &mut GradFilterState,
    swg: &SystemWithGrad,
    record: &ObsWithGrad,
    forget: f64,
) -> Result<GradStepOutput> {
    let p = swg.n_params();
    if record.d_z.len() != p || record.d_offset.len() != p || record.d_noise.len() != p {
        return Err(Error::InvalidInput(format!(
            "record carries derivatives for {} parameters, system has {p}",
            record.d_z.len()
        )));
    }
    let obs = &record.obs;
    let tau = match state.base.t_last {
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

    // time update with sensitivities
    let (x_pred, p_pred, dx_pred, dp_pred) = if tau > 0.0 {
        let props = swg.propagators(tau);
        let centered = &state.base.x - &swg.mean;
        let x_pred = &props.phi * &centered + &swg.mean;
        let p_pred = symmetrize(&(&props.phi * &state.base.p * props.phi.transpose() + &props.g));
        let mut dx_pred = Vec::with_capacity(p);
        let mut dp_pred = Vec::with_capacity(p);
        for j in 0..p {
            dx_pred.push(
                &props.d_phi[j] * &centered
                    + &props.phi * (&state.d_x[j] - &swg.d_mean[j])
                    + &swg.d_mean[j],
            );
            dp_pred.push(symmetrize(
                &(&props.d_phi[j] * &state.base.p * props.phi.transpose()
                    + &props.phi * &state.d_p[j] * props.phi.transpose()
                    + &props.phi * &state.base.p * props.d_phi[j].transpose()
                    + &props.d_g[j]),
            ));
        }
        (x_pred, p_pred, dx_pred, dp_pred)
    } else {
        (
            state.base.x.clone(),
            state.base.p.clone(),
            state.d_x.clone(),
            state.d_p.clone(),
        )
    };

    // measurement update
    let d = obs.spec.dim();
    let n = x_pred.len();
    if obs.spec.z.ncols() != n {
        return Err(Error::InvalidScheme(
            "selector does not match the state dimension".into(),
        ));
    }
    let z = &obs.spec.z;
    let innovation = &obs.value - (z * &x_pred + &obs.spec.offset);
    let f_raw = z * &p_pred * z.transpose() + &obs.spec.noise;
    let fac = factor_innovation(&f_raw)?;
    let f_inv = fac.chol.inverse();
    let u = &f_inv * &innovation;

    let evidence_gain =
        -0.5 * (innovation.dot(&u) + fac.log_det + d as f64 * crate::kalman::LN_2PI);

    let zp = z * &p_pred;
    let gain = fac.chol.solve(&zp).transpose();
    let w = DMatrix::identity(n, n) - &gain * z;
    let x_filt = &x_pred + &gain * &innovation;
    let p_filt =
        symmetrize(&(&w * &p_pred * w.transpose() + &gain * &obs.spec.noise * gain.transpose()));

    let mut d_eps = Vec::with_capacity(p);
    let mut info_diag = Vec::with_capacity(p);
    for j in 0..p {
        let dz = &record.d_z[j];
        let dv = -(dz * &x_pred + z * &dx_pred[j] + &record.d_offset[j]);
        let df = symmetrize(
            &(dz * &p_pred * z.transpose()
                + z * &dp_pred[j] * z.transpose()
                + z * &p_pred * dz.transpose()
                + &record.d_noise[j]),
        );
        // ε' = -1/2 (2 u^T v' - u^T F' u + tr(F^{-1} F'))
        let f_inv_df = &f_inv * &df;
        let trace_term = f_inv_df.trace();
        let deps_j = -0.5 * (2.0 * u.dot(&dv) - (&df * &u).dot(&u) + trace_term);
        d_eps.push(deps_j);
        let finv_dv = &f_inv * &dv;
        info_diag.push(dv.dot(&finv_dv) + 0.5 * (&f_inv_df * &f_inv_df).trace());

        // dK = (dP Z^T + P dZ^T - K dF) F^{-1}
        let dgain = (&dp_pred[j] * z.transpose() + &p_pred * dz.transpose() - &gain * &df) * &f_inv;
        let dw = -(&dgain * z + &gain * dz);
        let dp_filt = symmetrize(
            &(&dw * &p_pred * w.transpose()
                + &w * &dp_pred[j] * w.transpose()
                + &w * &p_pred * dw.transpose()
                + &dgain * &obs.spec.noise * gain.transpose()
                + &gain * &record.d_noise[j] * gain.transpose()
                + &gain * &obs.spec.noise * dgain.transpose()),
        );
        state.d_x[j] = &dx_pred[j] + &dgain * &innovation + &gain * &dv;
        state.d_p[j] = dp_filt;
        state.d_evidence[j] += deps_j;
        state.d_discounted[j] = (-forget * tau).exp() * state.d_discounted[j] + deps_j;
    }

    state.base.x = x_filt;
    state.base.p = p_filt;
    state.base.t_last = Some(obs.spec.t);
    state.base.evidence += evidence_gain;
    state.base.discounted = (-forget * tau).exp() * state.base.discounted + evidence_gain;

    Ok(GradStepOutput {
        report: StepReport {
            innovation,
            innovation_cov: fac.f,
            gain,
            evidence_gain,
            jittered: fac.jittered,
        },
        d_eps,
        info_diag,
    })
}

/// Total evidence and its gradient over a record sequence, from the
/// stationary prior.
pub fn batch_evidence_with_gradient(
    swg: &SystemWithGrad,
    records: &[ObsWithGrad],
) -> Result<(f64, Vec<f64>, GradFilterState)> {
    let mut state = init_stationary_with_grad(swg)?;
    for r in records {
        step_with_gradient(&mut state, swg, r, 0.0)?;
    }
    Ok((state.base.evidence, state.d_evidence.clone(), state))
}

/// Expected (Gauss–Newton) information matrix of the evidence over a record
/// sequence: per record the filter's innovation representation contributes
/// `I_jk = dv_j^T F^{-1} dv_k + 1/2 tr(F^{-1} dF_j F^{-1} dF_k)`.
/// One forward pass, always symmetric psd.
pub fn batch_fisher(swg: &SystemWithGrad, records: &[ObsWithGrad]) -> Result<DMatrix<f64>> {
    let p = swg.n_params();
    let mut state = init_stationary_with_grad(swg)?;
    let mut fisher = DMatrix::<f64>::zeros(p, p);

    for record in records {
        let obs = &record.obs;
        let tau = match state.base.t_last {
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
        let (x_pred, p_pred, dx_pred, dp_pred) = if tau > 0.0 {
            let props = swg.propagators(tau);
            let centered = &state.base.x - &swg.mean;
            let x_pred = &props.phi * &centered + &swg.mean;
            let p_pred =
                symmetrize(&(&props.phi * &state.base.p * props.phi.transpose() + &props.g));
            let mut dx_pred = Vec::with_capacity(p);
            let mut dp_pred = Vec::with_capacity(p);
            for j in 0..p {
                dx_pred.push(
                    &props.d_phi[j] * &centered
                        + &props.phi * (&state.d_x[j] - &swg.d_mean[j])
                        + &swg.d_mean[j],
                );
                dp_pred.push(symmetrize(
                    &(&props.d_phi[j] * &state.base.p * props.phi.transpose()
                        + &props.phi * &state.d_p[j] * props.phi.transpose()
                        + &props.phi * &state.base.p * props.d_phi[j].transpose()
                        + &props.d_g[j]),
                ));
            }
            (x_pred, p_pred, dx_pred, dp_pred)
        } else {
            (
                state.base.x.clone(),
                state.base.p.clone(),
                state.d_x.clone(),
                state.d_p.clone(),
            )
        };

        let z = &obs.spec.z;
        let f_raw = z * &p_pred * z.transpose() + &obs.spec.noise;
        let fac = factor_innovation(&f_raw)?;
        let f_inv = fac.chol.inverse();

        let mut dv = Vec::with_capacity(p);
        let mut f_inv_df = Vec::with_capacity(p);
        for j in 0..p {
            let dz = &record.d_z[j];
            dv.push(-(dz * &x_pred + z * &dx_pred[j] + &record.d_offset[j]));
            let df = symmetrize(
                &(dz * &p_pred * z.transpose()
                    + z * &dp_pred[j] * z.transpose()
                    + z * &p_pred * dz.transpose()
                    + &record.d_noise[j]),
            );
            f_inv_df.push(&f_inv * df);
        }
        for j in 0..p {
            let f_inv_dv_j = &f_inv * &dv[j];
            for k in j..p {
                let term = dv[k].dot(&f_inv_dv_j)
                    + 0.5 * (&f_inv_df[j] * &f_inv_df[k]).trace();
                fisher[(j, k)] += term;
                if k != j {
                    fisher[(k, j)] += term;
                }
            }
        }

        // advance the filter and its sensitivities with the plain recursion
        step_with_gradient(&mut state, swg, record, 0.0)?;
    }
    Ok(symmetrize(&fisher))
}
