//! Streaming maximum-likelihood tracking: after each record, one
//! preconditioned gradient step on the discounted evidence rate, so the
//! parameter estimate follows slowly varying truth at constant cost per
//! record. The prior's pull decays as `e^{-λ (t - t_0)}`.

use nalgebra::DVector;

use crate::data::ChannelSample;
use crate::error::{Error, Result};
use crate::estimator::chart::ParamChart;
use crate::estimator::prior::Prior;
use crate::kalman::{init_stationary_with_grad, step_with_gradient, GradFilterState};
use crate::model::ModeModel;

/// Step-size schedule for the per-record gradient step.
#[derive(Debug, Clone, Copy)]
pub enum StepRule {
    Fixed(f64),
    /// `initial / (1 + rate * i)` at record `i`; drives the iterate into
    /// the batch optimum when nothing is forgotten.
    Decaying { initial: f64, rate: f64 },
}

impl StepRule {
    fn at(&self, record: usize) -> f64 {
        match *self {
            StepRule::Fixed(s) => s,
            StepRule::Decaying { initial, rate } => initial / (1.0 + rate * record as f64),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrackOptions {
    /// Forgetting rate λ (1/time), nonnegative. There is no silent
    /// default: pick several multiples of the slowest expected mode
    /// timescale. Zero keeps all past evidence (batch-like behavior).
    pub forget: f64,
    /// Damping of the preconditioned (Newton-like) step; 1 is a full step.
    pub step_rule: StepRule,
    /// Records processed before stepping begins, letting the discounted
    /// gradient and the curvature estimate fill in. With a positive
    /// forgetting rate, stepping additionally waits until two discount
    /// windows (2/λ) of time have passed.
    pub warmup: usize,
    /// Hard cap on the per-record parameter movement (max norm).
    pub max_step: f64,
}

impl TrackOptions {
    pub fn new(forget: f64) -> Self {
        Self {
            forget,
            step_rule: StepRule::Fixed(1.0),
            warmup: 50,
            max_step: 0.01,
        }
    }
}

/// Per-record tracker emission.
#[derive(Debug, Clone)]
pub struct TrackPoint {
    pub t: f64,
    pub theta: DVector<f64>,
    pub real_rates: Vec<f64>,
    pub complex_modes: Vec<(f64, f64)>,
    pub evidence: f64,
    pub discounted: f64,
    pub evidence_gain: f64,
    pub x_filt: Vec<f64>,
    pub step_accepted: bool,
}

impl TrackPoint {
    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::json!({
            "t": self.t,
            "lambda": self.real_rates,
            "alpha": self.complex_modes.iter().map(|m| m.0).collect::<Vec<f64>>(),
            "omega": self.complex_modes.iter().map(|m| m.1).collect::<Vec<f64>>(),
            "eps": self.evidence_gain,
            "L": self.evidence,
            "L_disc": self.discounted,
            "x_filt": self.x_filt,
            "step_accepted": self.step_accepted,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrackSummary {
    pub records: usize,
    pub rejected_steps: usize,
    pub final_theta: DVector<f64>,
    pub final_model: ModeModel,
    pub discounted: f64,
}

/// Run the tracker over a record stream, calling `sink` after each record.
pub fn track_stream<I, F>(
    model0: &ModeModel,
    chart: &ParamChart,
    prior: Option<&Prior>,
    opts: &TrackOptions,
    records: I,
    mut sink: F,
) -> Result<TrackSummary>
where
    I: IntoIterator<Item = ChannelSample>,
    F: FnMut(&TrackPoint),
{
    if !(opts.forget >= 0.0) || !opts.forget.is_finite() {
        return Err(Error::InvalidInput(
            "forgetting rate must be finite and nonnegative".into(),
        ));
    }
    let mut theta = chart.pack(model0)?;
    let mut model = model0.clone();
    let mut grads = chart.grads(&model);
    let mut swg = chart.system_with_grad(&model, &grads)?;
    let mut state: GradFilterState = init_stationary_with_grad(&swg)?;

    let p = chart.dim();
    // running diagonal curvature: discounted per-record observed
    // information
    let mut curvature = DVector::from_element(p, 0.0);
    // effective discounted window size, W_i = e^{-λτ} W_{i-1} + 1
    let mut window = 0.0f64;
    let mut penalty = 1.0f64;
    let mut t_start: Option<f64> = None;
    let mut t_prev: Option<f64> = None;
    let mut rejected = 0usize;
    let mut count = 0usize;

    for sample in records {
        let record = chart.observation_with_grad(&model, &grads, &sample)?;
        let out = step_with_gradient(&mut state, &swg, &record, opts.forget)?;
        let t0 = *t_start.get_or_insert(sample.t);
        let tau = sample.t - t_prev.replace(sample.t).unwrap_or(sample.t);

        // discounted objective gradient: L̃ plus the exponentially
        // forgotten prior
        let prior_weight = (-opts.forget * (sample.t - t0)).exp();
        let mut g = DVector::from_fn(p, |i, _| state.d_discounted[i]);
        if let Some(pr) = prior {
            g += prior_weight * pr.log_density_grad(&theta);
        }

        let decay = (-opts.forget * tau).exp();
        window = decay * window + 1.0;
        for i in 0..p {
            curvature[i] = decay * curvature[i] + out.info_diag[i];
        }
        let floor = 1e-8 + 1e-4 * curvature.max();
        // Newton correction for the window, clamped to a unit trust region
        // per coordinate: chart coordinates are logs and shapes, where
        // steps beyond order one are extrapolation nonsense
        let direction =
            DVector::from_fn(p, |i, _| (g[i] / (curvature[i] + floor)).clamp(-1.0, 1.0));
        let window_filled =
            opts.forget == 0.0 || (sample.t - t0) * opts.forget >= 2.0;
        // the cumulative discounted gradient aggregates a whole discount
        // window; spread its Newton correction across the window so each
        // record contributes its fair share
        let step = if count < opts.warmup || !window_filled {
            0.0
        } else {
            opts.step_rule.at(count) * penalty / window
        };
        let mut delta = step * &direction;
        let overshoot = delta.amax();
        if overshoot > opts.max_step {
            delta *= opts.max_step / overshoot;
        }
        let candidate = &theta + delta;
        count += 1;

        let mut accepted = false;
        if step > 0.0 {
            if candidate.iter().all(|v| v.is_finite()) {
                if let Ok(next_model) = chart.unpack(&candidate) {
                    theta = candidate;
                    model = next_model;
                    grads = chart.grads(&model);
                    swg = chart.system_with_grad(&model, &grads)?;
                    accepted = true;
                }
            }
            if !accepted {
                rejected += 1;
                penalty = (penalty * 0.5).max(1e-6);
            }
        }

        sink(&TrackPoint {
            t: sample.t,
            theta: theta.clone(),
            real_rates: model.spec().real_rates().to_vec(),
            complex_modes: model.spec().complex_modes().to_vec(),
            evidence: state.base.evidence,
            discounted: state.base.discounted,
            evidence_gain: out.report.evidence_gain,
            x_filt: state.base.x.iter().copied().collect(),
            step_accepted: accepted,
        });
    }

    Ok(TrackSummary {
        records: count,
        rejected_steps: rejected,
        final_theta: theta,
        final_model: model,
        discounted: state.base.discounted,
    })
}
