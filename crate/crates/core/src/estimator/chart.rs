//! The unconstrained parameter chart: a flat vector θ maps bijectively to a
//! valid [`ModeModel`]. Rates, frequencies, Λ diagonals and measurement
//! variances live in log space; gauge freedom is removed by the pinned
//! shape entries, which never appear in θ.
//!
//! Entry layout, in order:
//! 1. `log λ` per real mode
//! 2. `(log α, log ω)` per complex mode
//! 3. free shape entries per mode (pinned rows skipped), column by column
//! 4. `Λ` packed lower triangle row-major, diagonal in log space
//! 5. channel means (`Free`) or mean frequency plus edge means (`GridTied`)
//! 6. `log H` diagonals when measurement noise is fitted

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kalman::{Observation, ObsSpec, ObsWithGrad, SystemWithGrad};
use crate::matfun::PsdFactor;
use crate::model::{MeasNoise, ModeModel, ModeShapes, ModeSpec, OMEGA_MIN};

/// How channel means are parameterized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MeanStructure {
    /// One free mean per channel.
    Free,
    /// Grid observable set of `k` PMUs: channels `0..k` are node
    /// frequencies sharing a single mean, channels `k..2k-1` are tree-edge
    /// phase differences with one mean each.
    GridTied { k: usize },
}

/// Chart descriptor: family sizes, channel count, pins, mean structure and
/// whether measurement noise is part of θ. Holds the fixed measurement
/// noise used when it is not fitted.
#[derive(Debug, Clone)]
pub struct ParamChart {
    n_real: usize,
    n_complex: usize,
    n_channels: usize,
    pins: Vec<usize>,
    mean_structure: MeanStructure,
    fit_meas_noise: bool,
    fixed_meas_noise: MeasNoise,
}

/// Per-parameter derivatives of the model matrices: drift, driving noise,
/// shapes, means and measurement noise.
#[derive(Debug, Clone)]
pub struct ChartGrads {
    pub d_drift: Vec<DMatrix<f64>>,
    pub d_noise: Vec<DMatrix<f64>>,
    pub d_b: Vec<DMatrix<f64>>,
    pub d_means: Vec<DVector<f64>>,
    pub d_h: Vec<DMatrix<f64>>,
}

const LAMBDA_DIAG_FLOOR: f64 = 1e-30;
const MEAS_VAR_FLOOR: f64 = 1e-30;

impl ParamChart {
    pub fn new(
        n_real: usize,
        n_complex: usize,
        n_channels: usize,
        pins: Vec<usize>,
        mean_structure: MeanStructure,
        fit_meas_noise: bool,
        fixed_meas_noise: MeasNoise,
    ) -> Result<Self> {
        if pins.len() != n_real + n_complex {
            return Err(Error::InvalidInput(format!(
                "expected {} pins, got {}",
                n_real + n_complex,
                pins.len()
            )));
        }
        if pins.iter().any(|&p| p >= n_channels) {
            return Err(Error::InvalidInput("pin out of channel range".into()));
        }
        if let MeanStructure::GridTied { k } = mean_structure {
            if 2 * k != n_channels + 1 {
                return Err(Error::InvalidInput(format!(
                    "grid-tied means require M = 2k-1 channels, got M={n_channels}, k={k}"
                )));
            }
        }
        if fixed_meas_noise.n_channels() != n_channels {
            return Err(Error::InvalidInput(
                "fixed measurement noise does not match the channel count".into(),
            ));
        }
        Ok(Self {
            n_real,
            n_complex,
            n_channels,
            pins,
            mean_structure,
            fit_meas_noise,
            fixed_meas_noise,
        })
    }

    /// Chart for an existing model, taking pins and fixed noise from it.
    pub fn for_model(
        model: &ModeModel,
        mean_structure: MeanStructure,
        fit_meas_noise: bool,
    ) -> Result<Self> {
        Self::new(
            model.spec().n_real(),
            model.spec().n_complex(),
            model.n_channels(),
            model.shapes().pins().to_vec(),
            mean_structure,
            fit_meas_noise,
            model.meas_noise().clone(),
        )
    }

    pub fn n_real(&self) -> usize {
        self.n_real
    }

    pub fn n_complex(&self) -> usize {
        self.n_complex
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn state_dim(&self) -> usize {
        self.n_real + 2 * self.n_complex
    }

    pub fn pins(&self) -> &[usize] {
        &self.pins
    }

    pub fn mean_structure(&self) -> MeanStructure {
        self.mean_structure
    }

    pub fn fits_meas_noise(&self) -> bool {
        self.fit_meas_noise
    }

    fn n_rate_entries(&self) -> usize {
        self.n_real + 2 * self.n_complex
    }

    fn n_shape_entries(&self) -> usize {
        let m = self.n_channels;
        self.n_real * (m - 1) + self.n_complex * (2 * m - 2)
    }

    fn n_lambda_entries(&self) -> usize {
        let n = self.state_dim();
        n * (n + 1) / 2
    }

    fn n_mean_entries(&self) -> usize {
        match self.mean_structure {
            MeanStructure::Free => self.n_channels,
            MeanStructure::GridTied { k } => k,
        }
    }

    fn n_noise_entries(&self) -> usize {
        if self.fit_meas_noise {
            self.n_channels
        } else {
            0
        }
    }

    /// Total number of chart parameters.
    pub fn dim(&self) -> usize {
        self.n_rate_entries()
            + self.n_shape_entries()
            + self.n_lambda_entries()
            + self.n_mean_entries()
            + self.n_noise_entries()
    }

    /// Index ranges of the parameter classes, in layout order:
    /// (rates, shapes, lambda, means, noise).
    pub fn class_ranges(
        &self,
    ) -> (
        std::ops::Range<usize>,
        std::ops::Range<usize>,
        std::ops::Range<usize>,
        std::ops::Range<usize>,
        std::ops::Range<usize>,
    ) {
        let r = self.n_rate_entries();
        let s = r + self.n_shape_entries();
        let l = s + self.n_lambda_entries();
        let m = l + self.n_mean_entries();
        let h = m + self.n_noise_entries();
        (0..r, r..s, s..l, l..m, m..h)
    }

    fn column_range(&self, mode_idx: usize) -> (usize, usize) {
        if mode_idx < self.n_real {
            (mode_idx, 1)
        } else {
            (self.n_real + 2 * (mode_idx - self.n_real), 2)
        }
    }

    /// Flatten a model into chart coordinates. The model must match the
    /// chart's family sizes and pins.
    pub fn pack(&self, model: &ModeModel) -> Result<DVector<f64>> {
        if model.spec().n_real() != self.n_real
            || model.spec().n_complex() != self.n_complex
            || model.n_channels() != self.n_channels
        {
            return Err(Error::InvalidInput(
                "model family does not match the chart".into(),
            ));
        }
        if model.shapes().pins() != self.pins.as_slice() {
            return Err(Error::InvalidInput(
                "model pins do not match the chart".into(),
            ));
        }
        let mut theta = Vec::with_capacity(self.dim());
        for &l in model.spec().real_rates() {
            theta.push(l.ln());
        }
        for &(a, w) in model.spec().complex_modes() {
            theta.push(a.ln());
            theta.push(w.ln());
        }
        let b = model.shapes().matrix();
        for idx in 0..self.pins.len() {
            let (col, width) = self.column_range(idx);
            for c in col..col + width {
                for row in 0..self.n_channels {
                    if row == self.pins[idx] {
                        continue;
                    }
                    theta.push(b[(row, c)]);
                }
            }
        }
        let lam = model.noise_factor().matrix();
        for i in 0..self.state_dim() {
            for j in 0..=i {
                if i == j {
                    theta.push(lam[(i, i)].max(LAMBDA_DIAG_FLOOR).ln());
                } else {
                    theta.push(lam[(i, j)]);
                }
            }
        }
        match self.mean_structure {
            MeanStructure::Free => {
                for i in 0..self.n_channels {
                    theta.push(model.channel_means()[i]);
                }
            }
            MeanStructure::GridTied { k } => {
                let f = (0..k).map(|i| model.channel_means()[i]).sum::<f64>() / k as f64;
                theta.push(f);
                for i in k..self.n_channels {
                    theta.push(model.channel_means()[i]);
                }
            }
        }
        if self.fit_meas_noise {
            for h in model.meas_noise().diag() {
                theta.push(h.max(MEAS_VAR_FLOOR).ln());
            }
        }
        debug_assert_eq!(theta.len(), self.dim());
        Ok(DVector::from_vec(theta))
    }

    /// Build a valid model from any finite θ. Complex-mode frequencies are
    /// floored at [`OMEGA_MIN`].
    pub fn unpack(&self, theta: &DVector<f64>) -> Result<ModeModel> {
        if theta.len() != self.dim() {
            return Err(Error::InvalidInput(format!(
                "θ has {} entries, chart needs {}",
                theta.len(),
                self.dim()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("θ must be finite".into()));
        }
        let mut at = 0usize;
        let mut take = || {
            let v = theta[at];
            at += 1;
            v
        };

        let real_rates: Vec<f64> = (0..self.n_real).map(|_| take().exp()).collect();
        let complex_modes: Vec<(f64, f64)> = (0..self.n_complex)
            .map(|_| {
                let a = take().exp();
                let w = take().exp().max(OMEGA_MIN);
                (a, w)
            })
            .collect();
        let spec = ModeSpec::new(real_rates, complex_modes)?;

        let mut b = DMatrix::zeros(self.n_channels, self.state_dim());
        for idx in 0..self.pins.len() {
            let (col, width) = self.column_range(idx);
            b[(self.pins[idx], col)] = 1.0;
            for c in col..col + width {
                for row in 0..self.n_channels {
                    if row == self.pins[idx] {
                        continue;
                    }
                    b[(row, c)] = take();
                }
            }
        }
        let shapes = ModeShapes::new(b, self.pins.clone(), &spec)?;

        let n = self.state_dim();
        let mut lam = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                lam[(i, j)] = if i == j { take().exp() } else { take() };
            }
        }

        let mut means = DVector::zeros(self.n_channels);
        match self.mean_structure {
            MeanStructure::Free => {
                for i in 0..self.n_channels {
                    means[i] = take();
                }
            }
            MeanStructure::GridTied { k } => {
                let f = take();
                for i in 0..k {
                    means[i] = f;
                }
                for i in k..self.n_channels {
                    means[i] = take();
                }
            }
        }

        let meas = if self.fit_meas_noise {
            let vars: Vec<f64> = (0..self.n_channels).map(|_| take().exp()).collect();
            MeasNoise::diagonal(&vars)?
        } else {
            self.fixed_meas_noise.clone()
        };
        debug_assert_eq!(at, self.dim());

        ModeModel::new(spec, shapes, PsdFactor::new(lam)?, means, meas)
    }

    /// Derivatives of the model matrices with respect to every chart entry,
    /// evaluated at `model = unpack(θ)`.
    pub fn grads(&self, model: &ModeModel) -> ChartGrads {
        let p = self.dim();
        let n = self.state_dim();
        let m = self.n_channels;
        let zero_n = DMatrix::zeros(n, n);
        let zero_b = DMatrix::zeros(m, n);
        let zero_mean = DVector::zeros(m);
        let zero_h = DMatrix::zeros(m, m);
        let mut g = ChartGrads {
            d_drift: vec![zero_n.clone(); p],
            d_noise: vec![zero_n.clone(); p],
            d_b: vec![zero_b; p],
            d_means: vec![zero_mean; p],
            d_h: vec![zero_h; p],
        };
        let mut at = 0usize;

        // rates and frequencies: D entries scale with the (log) parameter
        for (i, &l) in model.spec().real_rates().iter().enumerate() {
            g.d_drift[at][(i, i)] = -l;
            at += 1;
        }
        for (mi, &(a, w)) in model.spec().complex_modes().iter().enumerate() {
            let c = self.n_real + 2 * mi;
            g.d_drift[at][(c, c)] = -a;
            g.d_drift[at][(c + 1, c + 1)] = -a;
            at += 1;
            if w > OMEGA_MIN {
                g.d_drift[at][(c, c + 1)] = -w;
                g.d_drift[at][(c + 1, c)] = w;
            }
            at += 1;
        }

        for idx in 0..self.pins.len() {
            let (col, width) = self.column_range(idx);
            for c in col..col + width {
                for row in 0..m {
                    if row == self.pins[idx] {
                        continue;
                    }
                    g.d_b[at][(row, c)] = 1.0;
                    at += 1;
                }
            }
        }

        let lam = model.noise_factor().matrix();
        for i in 0..n {
            for j in 0..=i {
                let mut dl = DMatrix::zeros(n, n);
                dl[(i, j)] = if i == j { lam[(i, i)] } else { 1.0 };
                // Q = Λ Λ^T
                g.d_noise[at] = &dl * lam.transpose() + lam * dl.transpose();
                at += 1;
            }
        }

        match self.mean_structure {
            MeanStructure::Free => {
                for i in 0..m {
                    g.d_means[at][i] = 1.0;
                    at += 1;
                }
            }
            MeanStructure::GridTied { k } => {
                for i in 0..k {
                    g.d_means[at][i] = 1.0;
                }
                at += 1;
                for i in k..m {
                    g.d_means[at][i] = 1.0;
                    at += 1;
                }
            }
        }

        if self.fit_meas_noise {
            let diag = model.meas_noise().diag();
            for (c, h) in diag.iter().enumerate() {
                g.d_h[at][(c, c)] = *h;
                at += 1;
            }
        }
        debug_assert_eq!(at, p);
        g
    }

    /// The state-space side of the model with parameter derivatives.
    pub fn system_with_grad(&self, model: &ModeModel, grads: &ChartGrads) -> Result<SystemWithGrad> {
        let (sys, _, _) = model.realize()?;
        SystemWithGrad::new(sys, grads.d_drift.clone(), grads.d_noise.clone())
    }

    /// Assemble a filter observation for a channel-subset sample:
    /// `Z = rows(B)`, `offset = rows(means)`, `H = rows(meas_noise)`.
    pub fn observation(&self, model: &ModeModel, sample: &crate::data::ChannelSample) -> Result<Observation> {
        self.check_sample(sample)?;
        let b = model.shapes().matrix();
        let z = gather_rows(b, &sample.channels);
        let offset = DVector::from_fn(sample.channels.len(), |i, _| {
            model.channel_means()[sample.channels[i]]
        });
        let noise = model.meas_noise().submatrix(&sample.channels);
        Observation::new(
            ObsSpec::new(sample.t, z, offset, noise)?,
            DVector::from_row_slice(&sample.values),
        )
    }

    /// As [`ParamChart::observation`], carrying per-parameter derivatives.
    pub fn observation_with_grad(
        &self,
        model: &ModeModel,
        grads: &ChartGrads,
        sample: &crate::data::ChannelSample,
    ) -> Result<ObsWithGrad> {
        let obs = self.observation(model, sample)?;
        let p = self.dim();
        let mut d_z = Vec::with_capacity(p);
        let mut d_offset = Vec::with_capacity(p);
        let mut d_noise = Vec::with_capacity(p);
        for j in 0..p {
            d_z.push(gather_rows(&grads.d_b[j], &sample.channels));
            d_offset.push(DVector::from_fn(sample.channels.len(), |i, _| {
                grads.d_means[j][sample.channels[i]]
            }));
            d_noise.push(DMatrix::from_fn(
                sample.channels.len(),
                sample.channels.len(),
                |i, k| grads.d_h[j][(sample.channels[i], sample.channels[k])],
            ));
        }
        Ok(ObsWithGrad {
            obs,
            d_z,
            d_offset,
            d_noise,
        })
    }

    fn check_sample(&self, sample: &crate::data::ChannelSample) -> Result<()> {
        if sample.channels.is_empty() || sample.channels.len() != sample.values.len() {
            return Err(Error::InvalidScheme(
                "sample channels and values must be nonempty and aligned".into(),
            ));
        }
        if sample.channels.iter().any(|&c| c >= self.n_channels) {
            return Err(Error::InvalidScheme(format!(
                "sample channel out of range for {} channels",
                self.n_channels
            )));
        }
        Ok(())
    }
}

fn gather_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matfun;
    use crate::model::parameter_dimension;

    fn sample_model() -> ModeModel {
        let spec = ModeSpec::new(vec![0.8, 2.5], vec![(0.3, 4.0)]).unwrap();
        let m = 3;
        let mut b = DMatrix::zeros(m, 4);
        b[(1, 0)] = 1.0;
        b[(0, 0)] = 0.4;
        b[(2, 0)] = -0.1;
        b[(0, 1)] = 1.0;
        b[(1, 1)] = 0.2;
        b[(2, 1)] = 0.7;
        b[(2, 2)] = 1.0;
        b[(0, 2)] = -0.3;
        b[(1, 2)] = 0.5;
        b[(0, 3)] = 0.1;
        b[(1, 3)] = -0.6;
        let shapes = ModeShapes::new(b, vec![1, 0, 2], &spec).unwrap();
        let q = {
            let g = DMatrix::from_fn(4, 4, |i, j| ((i + 2 * j) % 4) as f64 * 0.3 - 0.2);
            &g * g.transpose() + DMatrix::identity(4, 4) * 0.5
        };
        ModeModel::new(
            spec,
            shapes,
            matfun::cholesky_psd(&q, 1e-12).unwrap(),
            DVector::from_row_slice(&[0.2, -0.1, 0.05]),
            MeasNoise::diagonal(&[0.01, 0.02, 0.03]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn dim_matches_parameter_dimension_for_grid_set() {
        // grid-tied chart without measurement noise reproduces the paper
        // dimension count
        for k in 1..=6usize {
            let m = 2 * k - 1;
            for (nr, nc) in [(0, 1), (1, 0), (2, 1), (1, 2)] {
                if nr + nc == 0 {
                    continue;
                }
                let chart = ParamChart::new(
                    nr,
                    nc,
                    m,
                    vec![0; nr + nc],
                    MeanStructure::GridTied { k },
                    false,
                    MeasNoise::diagonal(&vec![0.01; m]).unwrap(),
                )
                .unwrap();
                assert_eq!(chart.dim(), parameter_dimension(nr, nc, k), "nr={nr} nc={nc} k={k}");
            }
        }
    }

    #[test]
    fn single_real_mode_single_channel_layout() {
        // θ = (log λ, log Λ11, mean, log H): four entries
        let chart = ParamChart::new(
            1,
            0,
            1,
            vec![0],
            MeanStructure::Free,
            true,
            MeasNoise::diagonal(&[0.01]).unwrap(),
        )
        .unwrap();
        assert_eq!(chart.dim(), 4);
    }

    #[test]
    fn pack_unpack_round_trip() {
        let model = sample_model();
        let chart = ParamChart::for_model(&model, MeanStructure::Free, true).unwrap();
        let theta = chart.pack(&model).unwrap();
        assert_eq!(theta.len(), chart.dim());
        let back = chart.unpack(&theta).unwrap();
        let theta2 = chart.pack(&back).unwrap();
        assert!((&theta2 - &theta).amax() < 1e-14);
        assert_eq!(back.spec(), model.spec());
        assert!((back.shapes().matrix() - model.shapes().matrix()).amax() < 1e-14);
        assert!((back.channel_means() - model.channel_means()).amax() < 1e-14);
    }

    #[test]
    fn pinned_entries_never_appear_in_theta() {
        let model = sample_model();
        let chart = ParamChart::for_model(&model, MeanStructure::Free, true).unwrap();
        // perturb every θ entry; pins must stay exactly (1, 0)
        let mut theta = chart.pack(&model).unwrap();
        for v in theta.iter_mut() {
            *v += 0.37;
        }
        let m2 = chart.unpack(&theta).unwrap();
        let b = m2.shapes().matrix();
        assert_eq!(b[(1, 0)], 1.0);
        assert_eq!(b[(0, 1)], 1.0);
        assert_eq!(b[(2, 2)], 1.0);
        assert_eq!(b[(2, 3)], 0.0);
    }

    #[test]
    fn unpack_floors_tiny_frequency() {
        let chart = ParamChart::new(
            0,
            1,
            1,
            vec![0],
            MeanStructure::Free,
            false,
            MeasNoise::diagonal(&[0.01]).unwrap(),
        )
        .unwrap();
        let mut theta = DVector::zeros(chart.dim());
        theta[1] = -100.0; // log ω far below the floor
        let model = chart.unpack(&theta).unwrap();
        assert_eq!(model.spec().complex_modes()[0].1, OMEGA_MIN);
    }

    #[test]
    fn grid_tied_means_are_tied() {
        let chart = ParamChart::new(
            1,
            0,
            3,
            vec![0],
            MeanStructure::GridTied { k: 2 },
            false,
            MeasNoise::diagonal(&[0.0, 0.0, 0.0]).unwrap(),
        )
        .unwrap();
        let mut theta = DVector::zeros(chart.dim());
        let (_, _, _, means, _) = chart.class_ranges();
        theta[means.start] = 0.7; // F
        theta[means.start + 1] = -0.2; // edge mean
        let model = chart.unpack(&theta).unwrap();
        assert_eq!(model.channel_means()[0], 0.7);
        assert_eq!(model.channel_means()[1], 0.7);
        assert_eq!(model.channel_means()[2], -0.2);
    }

    #[test]
    fn chart_gradients_match_finite_differences() {
        let model = sample_model();
        let chart = ParamChart::for_model(&model, MeanStructure::Free, true).unwrap();
        let theta = chart.pack(&model).unwrap();
        let grads = chart.grads(&model);
        let h = 1e-7;
        for j in 0..chart.dim() {
            let mut tp = theta.clone();
            tp[j] += h;
            let mut tm = theta.clone();
            tm[j] -= h;
            let mp = chart.unpack(&tp).unwrap();
            let mm = chart.unpack(&tm).unwrap();

            let fd_d = (mp.spec().block_diagonal() - mm.spec().block_diagonal()) / (2.0 * h);
            assert!(
                (&grads.d_drift[j] - &fd_d).amax() < 1e-6,
                "drift grad mismatch at {j}"
            );
            let fd_q = (mp.driving_covariance() - mm.driving_covariance()) / (2.0 * h);
            assert!(
                (&grads.d_noise[j] - &fd_q).amax() < 1e-5,
                "noise grad mismatch at {j}"
            );
            let fd_b = (mp.shapes().matrix() - mm.shapes().matrix()) / (2.0 * h);
            assert!((&grads.d_b[j] - &fd_b).amax() < 1e-6, "B grad mismatch at {j}");
            let fd_mean = (mp.channel_means() - mm.channel_means()) / (2.0 * h);
            assert!(
                (&grads.d_means[j] - &fd_mean).amax() < 1e-6,
                "mean grad mismatch at {j}"
            );
            let fd_h = (mp.meas_noise().matrix() - mm.meas_noise().matrix()) / (2.0 * h);
            assert!((&grads.d_h[j] - &fd_h).amax() < 1e-6, "H grad mismatch at {j}");
        }
    }

    #[test]
    fn observation_assembly_maps_channels() {
        let model = sample_model();
        let chart = ParamChart::for_model(&model, MeanStructure::Free, true).unwrap();
        let sample = crate::data::ChannelSample {
            t: 1.5,
            channels: vec![2, 0],
            values: vec![0.9, -0.4],
        };
        let obs = chart.observation(&model, &sample).unwrap();
        assert_eq!(obs.spec.dim(), 2);
        let b = model.shapes().matrix();
        for col in 0..model.state_dim() {
            assert_eq!(obs.spec.z[(0, col)], b[(2, col)]);
            assert_eq!(obs.spec.z[(1, col)], b[(0, col)]);
        }
        assert_eq!(obs.spec.offset[0], model.channel_means()[2]);
        assert_eq!(obs.spec.noise[(0, 0)], 0.03);
        assert_eq!(obs.spec.noise[(1, 1)], 0.01);
    }
}
