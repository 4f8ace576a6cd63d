//! The mode-ansatz model family: a reduced set of real and complex modes
//! with shape matrix `B`, mode-driving noise factor `Λ` and per-channel
//! measurement noise. The observable covariance is
//! `C(τ) = B S e^{D^T τ} B^T` with `S` the stationary mode covariance.
//!
//! The mode covariance `S` is parameterized indirectly: the driving
//! covariance is `Q = Λ Λ^T` and `S` solves `D S + S D^T = -Q`, so every
//! parameter point corresponds to an exactly realizable state-space model.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matfun::{self, PsdFactor};
use crate::model::LtiSystem;

/// Smallest admissible angular frequency for a complex mode. Frequencies
/// below this sit on the real↔complex transition, which this family does
/// not chart uniformly; proximity is reported as a diagnostic.
pub const OMEGA_MIN: f64 = 1e-6;

/// Mode frequencies and damping rates. Real modes come first, each a decay
/// rate `λ > 0`; complex modes follow as pairs `(α > 0, ω ≥ OMEGA_MIN)`
/// occupying two state coordinates each.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSpec {
    real_rates: Vec<f64>,
    complex_modes: Vec<(f64, f64)>,
}

impl ModeSpec {
    pub fn new(real_rates: Vec<f64>, complex_modes: Vec<(f64, f64)>) -> Result<Self> {
        for &l in &real_rates {
            if !(l > 0.0) || !l.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "real mode rate must be positive and finite, got {l}"
                )));
            }
        }
        for &(a, w) in &complex_modes {
            if !(a > 0.0) || !a.is_finite() || !w.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "complex mode must have positive finite rate, got ({a}, {w})"
                )));
            }
            if w < OMEGA_MIN {
                return Err(Error::InvalidInput(format!(
                    "complex mode frequency {w} below the transition floor {OMEGA_MIN}"
                )));
            }
        }
        Ok(Self {
            real_rates,
            complex_modes,
        })
    }

    pub fn real_rates(&self) -> &[f64] {
        &self.real_rates
    }

    pub fn complex_modes(&self) -> &[(f64, f64)] {
        &self.complex_modes
    }

    pub fn n_real(&self) -> usize {
        self.real_rates.len()
    }

    pub fn n_complex(&self) -> usize {
        self.complex_modes.len()
    }

    pub fn n_modes(&self) -> usize {
        self.n_real() + self.n_complex()
    }

    /// State dimension `N = N_R + 2 N_C`.
    pub fn state_dim(&self) -> usize {
        self.n_real() + 2 * self.n_complex()
    }

    /// First state column and width (1 or 2) of mode `idx`.
    pub fn column_range(&self, idx: usize) -> (usize, usize) {
        if idx < self.n_real() {
            (idx, 1)
        } else {
            (self.n_real() + 2 * (idx - self.n_real()), 2)
        }
    }

    /// The block-diagonal drift `D`: scalar blocks `-λ`, 2x2 blocks
    /// `[[-α, -ω], [ω, -α]]`. Always stable by construction.
    pub fn block_diagonal(&self) -> DMatrix<f64> {
        let n = self.state_dim();
        let mut d = DMatrix::zeros(n, n);
        for (i, &l) in self.real_rates.iter().enumerate() {
            d[(i, i)] = -l;
        }
        for (m, &(a, w)) in self.complex_modes.iter().enumerate() {
            let c = self.n_real() + 2 * m;
            d[(c, c)] = -a;
            d[(c, c + 1)] = -w;
            d[(c + 1, c)] = w;
            d[(c + 1, c + 1)] = -a;
        }
        d
    }

    /// `e^{D^T τ}` in closed form per block, for `τ >= 0`:
    /// `e^{-λτ}` and `e^{-ατ} [[cos ωτ, sin ωτ], [-sin ωτ, cos ωτ]]`.
    pub fn propagator_transpose(&self, tau: f64) -> DMatrix<f64> {
        let n = self.state_dim();
        let mut e = DMatrix::zeros(n, n);
        for (i, &l) in self.real_rates.iter().enumerate() {
            e[(i, i)] = (-l * tau).exp();
        }
        for (m, &(a, w)) in self.complex_modes.iter().enumerate() {
            let c = self.n_real() + 2 * m;
            let decay = (-a * tau).exp();
            let (s, co) = (w * tau).sin_cos();
            e[(c, c)] = decay * co;
            e[(c, c + 1)] = decay * s;
            e[(c + 1, c)] = -decay * s;
            e[(c + 1, c + 1)] = decay * co;
        }
        e
    }

    /// Canonical ordering: real modes ascending in λ, complex ascending in
    /// (α, ω).
    pub fn is_sorted(&self) -> bool {
        self.real_rates.windows(2).all(|w| w[0] <= w[1])
            && self.complex_modes.windows(2).all(|w| w[0] <= w[1])
    }

    /// Distance of the closest complex mode to the real↔complex transition
    /// (its ω); `None` without complex modes.
    pub fn transition_proximity(&self) -> Option<f64> {
        self.complex_modes
            .iter()
            .map(|&(_, w)| w)
            .min_by(|a, b| a.partial_cmp(b).unwrap())
    }
}

/// Mode-shape matrix with per-mode pinned channels fixing the scale gauge:
/// a real mode column has `B[pin, col] = +1`; a complex pair has
/// `B[pin, col] = +1`, `B[pin, col+1] = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeShapes {
    b: DMatrix<f64>,
    pins: Vec<usize>,
}

impl ModeShapes {
    pub fn new(b: DMatrix<f64>, pins: Vec<usize>, spec: &ModeSpec) -> Result<Self> {
        if b.ncols() != spec.state_dim() {
            return Err(Error::InvalidInput(format!(
                "shape matrix has {} columns, spec needs {}",
                b.ncols(),
                spec.state_dim()
            )));
        }
        if pins.len() != spec.n_modes() {
            return Err(Error::InvalidInput(format!(
                "expected {} pins, got {}",
                spec.n_modes(),
                pins.len()
            )));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("shape matrix must be finite".into()));
        }
        for (idx, &pin) in pins.iter().enumerate() {
            if pin >= b.nrows() {
                return Err(Error::InvalidInput(format!(
                    "pin {pin} out of range for {} channels",
                    b.nrows()
                )));
            }
            let (col, width) = spec.column_range(idx);
            if b[(pin, col)] != 1.0 {
                return Err(Error::InvalidInput(format!(
                    "mode {idx}: pinned entry B[{pin},{col}] must be +1"
                )));
            }
            if width == 2 && b[(pin, col + 1)] != 0.0 {
                return Err(Error::InvalidInput(format!(
                    "mode {idx}: pinned entry B[{pin},{}] must be 0",
                    col + 1
                )));
            }
        }
        Ok(Self { b, pins })
    }

    /// All-ones-free shapes: pinned rows set and everything else zero.
    pub fn pinned_zero(m: usize, pins: Vec<usize>, spec: &ModeSpec) -> Result<Self> {
        let mut b = DMatrix::zeros(m, spec.state_dim());
        for (idx, &pin) in pins.iter().enumerate() {
            let (col, _) = spec.column_range(idx);
            if pin >= m {
                return Err(Error::InvalidInput(format!("pin {pin} out of range")));
            }
            b[(pin, col)] = 1.0;
        }
        Self::new(b, pins, spec)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn pins(&self) -> &[usize] {
        &self.pins
    }

    pub fn n_channels(&self) -> usize {
        self.b.nrows()
    }
}

/// Per-channel measurement-noise covariance. Stored as a full symmetric
/// psd matrix over the observation channels; records observing a channel
/// subset get the corresponding principal submatrix, so records with equal
/// selectors always share the same noise.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasNoise {
    cov: DMatrix<f64>,
}

impl MeasNoise {
    pub fn diagonal(vars: &[f64]) -> Result<Self> {
        if vars.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(
                "measurement variances must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            cov: DMatrix::from_diagonal(&DVector::from_row_slice(vars)),
        })
    }

    pub fn full(cov: DMatrix<f64>) -> Result<Self> {
        matfun::check_square_finite("meas_noise", &cov)?;
        matfun::check_symmetric_psd("meas_noise", &cov, 1e-10)?;
        Ok(Self { cov })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn n_channels(&self) -> usize {
        self.cov.nrows()
    }

    /// Noise covariance for a record observing `channels`.
    pub fn submatrix(&self, channels: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(channels.len(), channels.len(), |i, j| {
            self.cov[(channels[i], channels[j])]
        })
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.cov.nrows()).map(|i| self.cov[(i, i)]).collect()
    }

    pub fn is_diagonal(&self) -> bool {
        for i in 0..self.cov.nrows() {
            for j in 0..i {
                if self.cov[(i, j)] != 0.0 {
                    return false;
                }
            }
        }
        true
    }
}

/// The fitting parameterization: mode spec, gauge-fixed shapes, driving
/// noise factor `Λ` (so `Q = Λ Λ^T`), channel means and measurement noise.
#[derive(Debug, Clone)]
pub struct ModeModel {
    spec: ModeSpec,
    shapes: ModeShapes,
    noise_factor: PsdFactor,
    channel_means: DVector<f64>,
    meas_noise: MeasNoise,
}

impl ModeModel {
    pub fn new(
        spec: ModeSpec,
        shapes: ModeShapes,
        noise_factor: PsdFactor,
        channel_means: DVector<f64>,
        meas_noise: MeasNoise,
    ) -> Result<Self> {
        let n = spec.state_dim();
        let m = shapes.n_channels();
        if noise_factor.dim() != n {
            return Err(Error::InvalidInput(format!(
                "noise factor is {}x{}, state dimension is {n}",
                noise_factor.dim(),
                noise_factor.dim()
            )));
        }
        if channel_means.len() != m {
            return Err(Error::InvalidInput(format!(
                "expected {m} channel means, got {}",
                channel_means.len()
            )));
        }
        if meas_noise.n_channels() != m {
            return Err(Error::InvalidInput(format!(
                "measurement noise is over {} channels, shapes over {m}",
                meas_noise.n_channels()
            )));
        }
        if channel_means.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("channel means must be finite".into()));
        }
        Ok(Self {
            spec,
            shapes,
            noise_factor,
            channel_means,
            meas_noise,
        })
    }

    pub fn spec(&self) -> &ModeSpec {
        &self.spec
    }

    pub fn shapes(&self) -> &ModeShapes {
        &self.shapes
    }

    pub fn noise_factor(&self) -> &PsdFactor {
        &self.noise_factor
    }

    pub fn channel_means(&self) -> &DVector<f64> {
        &self.channel_means
    }

    pub fn meas_noise(&self) -> &MeasNoise {
        &self.meas_noise
    }

    pub fn n_channels(&self) -> usize {
        self.shapes.n_channels()
    }

    pub fn state_dim(&self) -> usize {
        self.spec.state_dim()
    }

    /// Mode-driving covariance rate `Q = Λ Λ^T`.
    pub fn driving_covariance(&self) -> DMatrix<f64> {
        self.noise_factor.product()
    }

    /// State-space realization over mode coordinates: the system `(D, Q)`
    /// plus the observation map `B` and channel means.
    pub fn realize(&self) -> Result<(LtiSystem, DMatrix<f64>, DVector<f64>)> {
        let sys = LtiSystem::new(self.spec.block_diagonal(), self.driving_covariance())?;
        Ok((sys, self.shapes.b.clone(), self.channel_means.clone()))
    }

    /// Stationary mode covariance `S` solving `D S + S D^T = -Q`. Its
    /// diagonal holds the squared mode amplitudes.
    pub fn mode_covariance_matrix(&self) -> Result<DMatrix<f64>> {
        let n = self.state_dim();
        if n == 0 {
            return Ok(DMatrix::zeros(0, 0));
        }
        matfun::solve_lyapunov(&self.spec.block_diagonal(), &self.driving_covariance())
    }

    /// Observable covariance `C(τ) = B S e^{D^T τ} B^T` for `τ >= 0`, with
    /// transpose symmetry for negative lags. Uses the closed-form block
    /// propagator, independent of the general matrix-exponential path.
    pub fn mode_covariance(&self, tau: f64) -> Result<DMatrix<f64>> {
        let m = self.n_channels();
        if self.state_dim() == 0 {
            return Ok(DMatrix::zeros(m, m));
        }
        let s = self.mode_covariance_matrix()?;
        if tau >= 0.0 {
            Ok(&self.shapes.b * s * self.spec.propagator_transpose(tau) * self.shapes.b.transpose())
        } else {
            Ok(self.mode_covariance(-tau)?.transpose())
        }
    }

    /// Per-mode amplitudes `sqrt(S_ii)` (complex modes report the rms of
    /// their two coordinates).
    pub fn amplitudes(&self) -> Result<Vec<f64>> {
        let s = self.mode_covariance_matrix()?;
        let mut out = Vec::with_capacity(self.spec.n_modes());
        for idx in 0..self.spec.n_modes() {
            let (col, width) = self.spec.column_range(idx);
            let mean_sq =
                (0..width).map(|w| s[(col + w, col + w)]).sum::<f64>() / width as f64;
            out.push(mean_sq.max(0.0).sqrt());
        }
        Ok(out)
    }

    /// Reorder modes into the canonical order (real ascending λ, complex
    /// ascending (α, ω), ties by pin). `Q` is permuted and refactored; the
    /// represented process is unchanged.
    pub fn canonicalize(&self) -> Result<ModeModel> {
        if self.spec.n_modes() == 0 {
            return Ok(self.clone());
        }
        let nr = self.spec.n_real();
        let mut real_order: Vec<usize> = (0..nr).collect();
        real_order.sort_by(|&i, &j| {
            (self.spec.real_rates[i], self.shapes.pins[i])
                .partial_cmp(&(self.spec.real_rates[j], self.shapes.pins[j]))
                .unwrap()
        });
        let mut cplx_order: Vec<usize> = (0..self.spec.n_complex()).collect();
        cplx_order.sort_by(|&i, &j| {
            let key = |m: usize| {
                let (a, w) = self.spec.complex_modes[m];
                (a, w, self.shapes.pins[nr + m])
            };
            key(i).partial_cmp(&key(j)).unwrap()
        });

        // state-coordinate permutation: new coordinate p -> old coordinate perm[p]
        let mut perm = Vec::with_capacity(self.state_dim());
        let mut new_real = Vec::with_capacity(nr);
        let mut new_pins = Vec::with_capacity(self.spec.n_modes());
        for &i in &real_order {
            new_real.push(self.spec.real_rates[i]);
            new_pins.push(self.shapes.pins[i]);
            perm.push(i);
        }
        let mut new_cplx = Vec::with_capacity(self.spec.n_complex());
        for &m in &cplx_order {
            new_cplx.push(self.spec.complex_modes[m]);
            new_pins.push(self.shapes.pins[nr + m]);
            perm.push(nr + 2 * m);
            perm.push(nr + 2 * m + 1);
        }

        let spec = ModeSpec::new(new_real, new_cplx)?;
        let b = DMatrix::from_fn(self.n_channels(), self.state_dim(), |i, j| {
            self.shapes.b[(i, perm[j])]
        });
        let q = self.driving_covariance();
        let q_perm = DMatrix::from_fn(self.state_dim(), self.state_dim(), |i, j| {
            q[(perm[i], perm[j])]
        });
        let noise_factor = matfun::cholesky_psd(&q_perm, 1e-10)?;
        ModeModel::new(
            spec.clone(),
            ModeShapes::new(b, new_pins, &spec)?,
            noise_factor,
            self.channel_means.clone(),
            self.meas_noise.clone(),
        )
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let m = self.n_channels();
        let n = self.state_dim();
        let b: Vec<f64> = (0..m)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| self.shapes.b[(i, j)])
            .collect();
        let lambda: Vec<f64> = (0..n)
            .flat_map(|i| (0..=i).map(move |j| (i, j)))
            .map(|(i, j)| self.noise_factor.matrix()[(i, j)])
            .collect();
        let meas: Vec<f64> = (0..m)
            .flat_map(|i| (0..m).map(move |j| (i, j)))
            .map(|(i, j)| self.meas_noise.cov[(i, j)])
            .collect();
        serde_json::to_value(ModeModelJson {
            format: FORMAT_TAG.to_string(),
            n_channels: m,
            real_rates: self.spec.real_rates.clone(),
            complex_modes: self.spec.complex_modes.clone(),
            b,
            pins: self.shapes.pins.clone(),
            lambda,
            channel_means: self.channel_means.iter().copied().collect(),
            meas_noise: meas,
        })
        .expect("mode model serialization cannot fail")
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json_value()).expect("serialization cannot fail")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let doc: ModeModelJson = serde_json::from_str(s)?;
        doc.into_model()
    }

    pub fn from_json_value(v: serde_json::Value) -> Result<Self> {
        let doc: ModeModelJson = serde_json::from_value(v)?;
        doc.into_model()
    }
}

const FORMAT_TAG: &str = "mode-model/1";

#[derive(Debug, Serialize, Deserialize)]
struct ModeModelJson {
    format: String,
    n_channels: usize,
    real_rates: Vec<f64>,
    complex_modes: Vec<(f64, f64)>,
    #[serde(rename = "B")]
    b: Vec<f64>,
    pins: Vec<usize>,
    #[serde(rename = "Lambda")]
    lambda: Vec<f64>,
    channel_means: Vec<f64>,
    meas_noise: Vec<f64>,
}

impl ModeModelJson {
    fn into_model(self) -> Result<ModeModel> {
        if self.format != FORMAT_TAG {
            return Err(Error::InvalidInput(format!(
                "unsupported model format {:?}, expected {FORMAT_TAG:?}",
                self.format
            )));
        }
        let spec = ModeSpec::new(self.real_rates, self.complex_modes)?;
        let n = spec.state_dim();
        let m = self.n_channels;
        if self.b.len() != m * n {
            return Err(Error::InvalidInput(format!(
                "B must hold {}x{} row-major entries, got {}",
                m,
                n,
                self.b.len()
            )));
        }
        let b = DMatrix::from_row_slice(m, n, &self.b);
        if self.lambda.len() != n * (n + 1) / 2 {
            return Err(Error::InvalidInput(format!(
                "Lambda must hold {} packed entries, got {}",
                n * (n + 1) / 2,
                self.lambda.len()
            )));
        }
        let mut l = DMatrix::zeros(n, n);
        let mut it = self.lambda.iter();
        for i in 0..n {
            for j in 0..=i {
                l[(i, j)] = *it.next().unwrap();
            }
        }
        if self.meas_noise.len() != m * m {
            return Err(Error::InvalidInput(format!(
                "meas_noise must hold {}x{} row-major entries, got {}",
                m,
                m,
                self.meas_noise.len()
            )));
        }
        ModeModel::new(
            spec.clone(),
            ModeShapes::new(b, self.pins, &spec)?,
            PsdFactor::new(l)?,
            DVector::from_row_slice(&self.channel_means),
            MeasNoise::full(DMatrix::from_row_slice(m, m, &self.meas_noise))?,
        )
    }
}

/// Matrix exponential of a symmetric matrix via eigendecomposition.
pub fn sym_expm(r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    matfun::check_square_finite("R", r)?;
    if !matfun::is_symmetric(r, 1e-9) {
        return Err(Error::InvalidInput("matrix must be symmetric".into()));
    }
    let eig = nalgebra::SymmetricEigen::new(r.clone());
    let exp_vals = DVector::from_iterator(r.nrows(), eig.eigenvalues.iter().map(|v| v.exp()));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&exp_vals) * eig.eigenvectors.transpose())
}

/// Matrix logarithm of a symmetric positive-definite matrix; inverse of
/// [`sym_expm`]. Provided as the conversion route for the `S = e^R`
/// parameterization of mode covariances.
pub fn sym_logm(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    matfun::check_square_finite("S", s)?;
    if !matfun::is_symmetric(s, 1e-9) {
        return Err(Error::InvalidInput("matrix must be symmetric".into()));
    }
    let eig = nalgebra::SymmetricEigen::new(s.clone());
    if eig.eigenvalues.iter().any(|&v| v <= 0.0) {
        return Err(Error::NotPsd {
            min_eig: eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min),
        });
    }
    let log_vals = DVector::from_iterator(s.nrows(), eig.eigenvalues.iter().map(|v| v.ln()));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&log_vals) * eig.eigenvectors.transpose())
}

/// Number of free parameters for fitting `n_real` real and `n_complex`
/// complex modes to the grid-style observable set of `k_pmus` PMUs
/// (`M = 2k-1` channels): rates and frequencies, gauge-fixed shapes, the
/// packed mode-noise factor, one mean frequency and `k-1` mean phase
/// differences. Measurement noise is not counted.
///
/// The itemized count equals `N(2k + (N-1)/2) + k` with `N` the state
/// dimension, and `(N+1)(M + N/2) - (k-1)`; both identities are asserted.
/// Ten PMUs with two real modes and one complex mode give 96 — an easy
/// case to miscount by hand, so the enumeration is the authority here.
pub fn parameter_dimension(n_real: usize, n_complex: usize, k_pmus: usize) -> usize {
    assert!(k_pmus >= 1, "at least one PMU required");
    let m = 2 * k_pmus - 1;
    let n = n_real + 2 * n_complex;
    let itemized = n_real
        + 2 * n_complex
        + n_real * (m - 1)
        + n_complex * (2 * m - 2)
        + n * (n + 1) / 2
        + 1
        + (k_pmus - 1);
    // must agree with the two closed-form counts
    let grid_form = n * (4 * k_pmus + n - 1) / 2 + k_pmus;
    let generic_form = (n + 1) * (2 * m + n) / 2;
    assert_eq!(itemized, grid_form, "grid-form dimension mismatch");
    assert_eq!(
        itemized + (k_pmus - 1),
        generic_form,
        "generic-form dimension mismatch"
    );
    itemized
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn single_complex_model(alpha: f64, omega: f64, q: f64) -> ModeModel {
        let spec = ModeSpec::new(vec![], vec![(alpha, omega)]).unwrap();
        let b = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let shapes = ModeShapes::new(b, vec![0], &spec).unwrap();
        let lambda = matfun::cholesky_psd(&(q * DMatrix::identity(2, 2)), 1e-12).unwrap();
        ModeModel::new(
            spec,
            shapes,
            lambda,
            DVector::zeros(1),
            MeasNoise::diagonal(&[0.0]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn block_diagonal_single_real() {
        let spec = ModeSpec::new(vec![2.0], vec![]).unwrap();
        let d = spec.block_diagonal();
        assert_eq!(d.nrows(), 1);
        assert_relative_eq!(d[(0, 0)], -2.0);
    }

    #[test]
    fn block_diagonal_single_complex() {
        let spec = ModeSpec::new(vec![], vec![(0.1, 3.0)]).unwrap();
        let d = spec.block_diagonal();
        let expected = DMatrix::from_row_slice(2, 2, &[-0.1, -3.0, 3.0, -0.1]);
        assert!((d - expected).norm() < 1e-15);
    }

    #[test]
    fn block_diagonal_assembly_order() {
        let spec = ModeSpec::new(vec![1.0, 2.0], vec![(0.5, 6.0)]).unwrap();
        let d = spec.block_diagonal();
        assert_eq!(d.nrows(), 4);
        assert_relative_eq!(d[(0, 0)], -1.0);
        assert_relative_eq!(d[(1, 1)], -2.0);
        assert_relative_eq!(d[(2, 3)], -6.0);
        assert_relative_eq!(d[(3, 2)], 6.0);
        assert!(matfun::is_stable(&d).unwrap().stable);
    }

    #[test]
    fn propagator_matches_expm() {
        let spec = ModeSpec::new(vec![0.7], vec![(0.2, 4.0), (1.1, 0.5)]).unwrap();
        let d = spec.block_diagonal();
        for tau in [0.0, 0.3, 2.0] {
            let closed = spec.propagator_transpose(tau);
            let general = matfun::expm(&d, tau).unwrap().transpose();
            assert!((closed - general).norm() < 1e-12);
        }
    }

    #[test]
    fn single_real_mode_reduces_to_ou() {
        use crate::model::KernelParams;
        let (lambda, q) = (1.3, 0.8);
        let spec = ModeSpec::new(vec![lambda], vec![]).unwrap();
        let shapes = ModeShapes::new(DMatrix::from_row_slice(1, 1, &[1.0]), vec![0], &spec).unwrap();
        let model = ModeModel::new(
            spec,
            shapes,
            matfun::cholesky_psd(&DMatrix::from_row_slice(1, 1, &[q]), 1e-12).unwrap(),
            DVector::zeros(1),
            MeasNoise::diagonal(&[0.0]).unwrap(),
        )
        .unwrap();
        let ou = KernelParams::Ou {
            mu: lambda,
            sigma: q.sqrt(),
        };
        for tau in [0.0, 0.5, 1.0, 3.0] {
            assert_relative_eq!(
                model.mode_covariance(tau).unwrap()[(0, 0)],
                ou.eval(tau).unwrap(),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn single_complex_mode_rotating_kernel() {
        let (alpha, omega, q) = (0.25, 3.0, 1.6);
        let model = single_complex_model(alpha, omega, q);
        for tau in [0.0, 0.4, 1.0, 2.5] {
            let got = model.mode_covariance(tau).unwrap()[(0, 0)];
            let expected = q / (2.0 * alpha) * (-alpha * tau).exp() * (omega * tau).cos();
            assert_relative_eq!(got, expected, max_relative = 1e-11, epsilon = 1e-12);
        }
    }

    #[test]
    fn realization_covariance_identity() {
        // B S e^{D^T τ} B^T equals the generic lagged covariance mapped through B
        let spec = ModeSpec::new(vec![0.9], vec![(0.3, 2.0)]).unwrap();
        let b = DMatrix::from_row_slice(
            2,
            3,
            &[1.0, 1.0, 0.0, -0.4, 0.7, 0.2],
        );
        let shapes = ModeShapes::new(b.clone(), vec![0, 0], &spec).unwrap();
        let q = {
            let g = DMatrix::from_row_slice(
                3,
                3,
                &[0.9, 0.1, 0.0, 0.1, 1.2, -0.2, 0.0, -0.2, 0.5],
            );
            &g * g.transpose()
        };
        let model = ModeModel::new(
            spec,
            shapes,
            matfun::cholesky_psd(&q, 1e-12).unwrap(),
            DVector::zeros(2),
            MeasNoise::diagonal(&[0.0, 0.0]).unwrap(),
        )
        .unwrap();
        let (sys, bmat, _) = model.realize().unwrap();
        for tau in [0.0, 0.2, 1.0, 4.0] {
            let via_real = &bmat * sys.lagged_covariance(tau).unwrap() * bmat.transpose();
            let via_modes = model.mode_covariance(tau).unwrap();
            assert!(
                (via_real - &via_modes).norm() < 1e-10 * via_modes.norm().max(1.0),
                "tau={tau}"
            );
        }
    }

    #[test]
    fn mode_covariance_zero_lag_is_psd() {
        let model = single_complex_model(0.2, 1.5, 0.7);
        let c0 = model.mode_covariance(0.0).unwrap();
        let min_eig = matfun::symmetrize(&c0)
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        assert!(min_eig >= -1e-10 * c0.trace().abs());
    }

    #[test]
    fn mode_covariance_transpose_symmetry() {
        let model = single_complex_model(0.2, 1.5, 0.7);
        for tau in [0.3, 1.1] {
            let fwd = model.mode_covariance(tau).unwrap();
            let bwd = model.mode_covariance(-tau).unwrap();
            assert!((fwd.transpose() - bwd).norm() < 1e-14);
        }
    }

    #[test]
    fn canonicalize_sorts_and_preserves_covariance() {
        let spec = ModeSpec::new(vec![2.0, 1.0], vec![(0.8, 1.0), (0.3, 5.0)]).unwrap();
        let m = 3;
        let mut b = DMatrix::zeros(m, spec.state_dim());
        // pins at channel 0 for every mode, free entries elsewhere
        b[(0, 0)] = 1.0;
        b[(1, 0)] = 0.4;
        b[(0, 1)] = 1.0;
        b[(2, 1)] = -0.3;
        b[(0, 2)] = 1.0;
        b[(1, 2)] = 0.2;
        b[(1, 3)] = -0.5;
        b[(0, 4)] = 1.0;
        b[(2, 4)] = 0.9;
        b[(2, 5)] = 0.1;
        let shapes = ModeShapes::new(b, vec![0, 0, 0, 0], &spec).unwrap();
        let q = {
            let g = DMatrix::from_fn(6, 6, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.2 - 0.3);
            &g * g.transpose() + DMatrix::identity(6, 6) * 0.1
        };
        let model = ModeModel::new(
            spec,
            shapes,
            matfun::cholesky_psd(&q, 1e-12).unwrap(),
            DVector::from_row_slice(&[0.1, -0.2, 0.0]),
            MeasNoise::diagonal(&[0.01, 0.01, 0.01]).unwrap(),
        )
        .unwrap();
        let canon = model.canonicalize().unwrap();
        assert!(canon.spec().is_sorted());
        assert_eq!(canon.spec().real_rates(), &[1.0, 2.0]);
        assert_eq!(canon.spec().complex_modes(), &[(0.3, 5.0), (0.8, 1.0)]);
        for tau in [0.0, 0.7, 2.0] {
            let a = model.mode_covariance(tau).unwrap();
            let b = canon.mode_covariance(tau).unwrap();
            assert!((a - &b).norm() < 1e-9 * b.norm().max(1.0), "tau={tau}");
        }
    }

    #[test]
    fn json_round_trip() {
        let model = single_complex_model(0.15, 2.4, 1.1);
        let text = model.to_json_string();
        assert!(text.contains("mode-model/1"));
        let back = ModeModel::from_json_str(&text).unwrap();
        assert_eq!(back.spec(), model.spec());
        assert!((back.shapes().matrix() - model.shapes().matrix()).norm() < 1e-15);
        assert!(
            (back.noise_factor().matrix() - model.noise_factor().matrix()).norm() < 1e-15
        );
    }

    #[test]
    fn json_rejects_wrong_format() {
        let model = single_complex_model(0.15, 2.4, 1.1);
        let mut v = model.to_json_value();
        v["format"] = serde_json::json!("mode-model/999");
        assert!(ModeModel::from_json_value(v).is_err());
    }

    #[test]
    fn sym_exp_log_round_trip() {
        let r = DMatrix::from_row_slice(2, 2, &[0.3, -0.2, -0.2, 0.8]);
        let s = sym_expm(&r).unwrap();
        let back = sym_logm(&s).unwrap();
        assert!((back - &r).norm() < 1e-12);
    }

    #[test]
    fn dimension_examples() {
        assert_eq!(parameter_dimension(0, 0, 1), 1);
        assert_eq!(parameter_dimension(1, 0, 1), 3);
        assert_eq!(parameter_dimension(2, 1, 10), 96);
    }

    #[test]
    fn dimension_formula_agreement_over_grid() {
        // parameter_dimension asserts agreement with both closed forms
        for n_real in 0..=4 {
            for n_complex in 0..=4 {
                for k in 1..=12 {
                    let _ = parameter_dimension(n_real, n_complex, k);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_pins() {
        let spec = ModeSpec::new(vec![1.0], vec![]).unwrap();
        let b = DMatrix::from_row_slice(2, 1, &[0.5, 1.0]);
        assert!(ModeShapes::new(b.clone(), vec![0], &spec).is_err());
        assert!(ModeShapes::new(b, vec![1], &spec).is_ok());
    }

    #[test]
    fn rejects_tiny_omega() {
        assert!(ModeSpec::new(vec![], vec![(0.1, 1e-9)]).is_err());
    }
}
