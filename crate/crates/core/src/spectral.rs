//! Periodogram utilities: Hann windowing, one-sided power spectra with
//! window-power normalization, Welch averaging, log-log slope fits and the
//! theoretical spectrum of a noise-driven second-order system.
//!
//! Conventions: uniform sampling only (irregular data goes through the
//! filter, not the spectral path); one-sided density over frequency in Hz,
//! normalized so white noise of variance `v` sampled at `dt` sits at level
//! `2 v dt` and binwise power sums to the windowed-series variance.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// One-sided power spectral density estimate.
#[derive(Debug, Clone)]
pub struct Periodogram {
    pub freqs: Vec<f64>,
    pub power: Vec<f64>,
    pub window: String,
    pub duration: f64,
}

/// Least-squares slope of `log power` against `log frequency`.
#[derive(Debug, Clone, Copy)]
pub struct SlopeFit {
    pub slope: f64,
    pub stderr: f64,
    pub n_bins: usize,
}

/// Hann window `w_i = sin²(π i / (n-1))`: zero at the ends, one at the
/// middle for odd lengths.
pub fn hann_window(samples: usize) -> Vec<f64> {
    assert!(samples >= 2, "window needs at least two samples");
    (0..samples)
        .map(|i| {
            if i == 0 || i == samples - 1 {
                return 0.0;
            }
            let s = (std::f64::consts::PI * i as f64 / (samples - 1) as f64).sin();
            s * s
        })
        .collect()
}

/// Single-window periodogram of a uniformly sampled series. The series is
/// demeaned, windowed, and normalized by the window power `Σ w²`.
pub fn periodogram(series: &[f64], dt: f64, window: &[f64]) -> Result<Periodogram> {
    let n = series.len();
    if n < 64 {
        return Err(Error::InvalidInput(format!(
            "need at least 64 samples, got {n}"
        )));
    }
    if window.len() != n {
        return Err(Error::InvalidInput(
            "window length must match the series".into(),
        ));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidInput(format!("bad sample step {dt}")));
    }

    let mean = series.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = series
        .iter()
        .zip(window)
        .map(|(&x, &w)| Complex::new((x - mean) * w, 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);

    let window_power: f64 = window.iter().map(|w| w * w).sum();
    let n_half = n / 2;
    let mut freqs = Vec::with_capacity(n_half + 1);
    let mut power = Vec::with_capacity(n_half + 1);
    for k in 0..=n_half {
        let two_sided = buf[k].norm_sqr() * dt / window_power;
        let fold = if k == 0 || (n % 2 == 0 && k == n_half) {
            1.0
        } else {
            2.0
        };
        freqs.push(k as f64 / (n as f64 * dt));
        power.push(fold * two_sided);
    }
    Ok(Periodogram {
        freqs,
        power,
        window: "hann".to_string(),
        duration: n as f64 * dt,
    })
}

/// Periodogram from explicit sample times; rejects non-uniform grids.
pub fn periodogram_from_times(times: &[f64], values: &[f64], window: &[f64]) -> Result<Periodogram> {
    let dt = uniform_step(times)?;
    if values.len() != times.len() {
        return Err(Error::InvalidInput("times and values lengths differ".into()));
    }
    periodogram(values, dt, window)
}

/// Uniform spacing of a time grid, or [`Error::NonUniform`].
pub fn uniform_step(times: &[f64]) -> Result<f64> {
    if times.len() < 2 {
        return Err(Error::InvalidInput("need at least two times".into()));
    }
    let dt = times[1] - times[0];
    if !(dt > 0.0) {
        return Err(Error::NonUniform);
    }
    for w in times.windows(2) {
        if ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.max(1.0) {
            return Err(Error::NonUniform);
        }
    }
    Ok(dt)
}

/// Welch estimate: average of Hann-windowed segment periodograms with the
/// given overlap fraction.
pub fn welch(series: &[f64], dt: f64, segments: usize, overlap: f64) -> Result<Periodogram> {
    if segments == 0 {
        return Err(Error::InvalidInput("need at least one segment".into()));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidInput("overlap must be in [0, 1)".into()));
    }
    let n = series.len();
    let denom = 1.0 + (segments as f64 - 1.0) * (1.0 - overlap);
    let seg_len = ((n as f64 / denom).floor() as usize).min(n);
    if seg_len < 64 {
        return Err(Error::InvalidInput(format!(
            "segments too short ({seg_len} samples); fewer segments or more data needed"
        )));
    }
    let hop = ((seg_len as f64) * (1.0 - overlap)).max(1.0) as usize;
    let window = hann_window(seg_len);

    let mut acc: Option<Periodogram> = None;
    let mut count = 0usize;
    let mut start = 0usize;
    while start + seg_len <= n {
        let pg = periodogram(&series[start..start + seg_len], dt, &window)?;
        match &mut acc {
            None => acc = Some(pg),
            Some(a) => {
                for (p, q) in a.power.iter_mut().zip(&pg.power) {
                    *p += q;
                }
            }
        }
        count += 1;
        start += hop;
    }
    let mut out = acc.expect("at least one segment fits");
    for p in &mut out.power {
        *p /= count as f64;
    }
    out.window = format!("welch-hann/{count}");
    Ok(out)
}

/// Least-squares log-log slope over the band `[f_lo, f_hi]`.
pub fn loglog_slope(pg: &Periodogram, band: (f64, f64)) -> Result<SlopeFit> {
    let pts: Vec<(f64, f64)> = pg
        .freqs
        .iter()
        .zip(&pg.power)
        .filter(|(&f, &p)| f >= band.0 && f <= band.1 && f > 0.0 && p > 0.0)
        .map(|(&f, &p)| (f.ln(), p.ln()))
        .collect();
    let n = pts.len();
    if n < 8 {
        return Err(Error::InsufficientBand);
    }
    let xbar = pts.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let ybar = pts.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let sxx: f64 = pts.iter().map(|p| (p.0 - xbar) * (p.0 - xbar)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - xbar) * (p.1 - ybar)).sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let ss_res: f64 = pts
        .iter()
        .map(|p| {
            let r = p.1 - (intercept + slope * p.0);
            r * r
        })
        .sum();
    let stderr = if n > 2 {
        (ss_res / (n as f64 - 2.0) / sxx).sqrt()
    } else {
        f64::INFINITY
    };
    Ok(SlopeFit {
        slope,
        stderr,
        n_bins: n,
    })
}

/// Theoretical power spectrum of `m x'' + β x' + k x = η` driven by noise
/// with power spectrum `P(Ω)`: `|x̂(Ω)|² = P(Ω) / ((k - m Ω²)² + β² Ω²)`.
#[derive(Debug, Clone, Copy)]
pub struct SecondOrderPsd {
    pub mass: f64,
    pub damping: f64,
    pub stiffness: f64,
}

impl SecondOrderPsd {
    pub fn new(mass: f64, damping: f64, stiffness: f64) -> Result<Self> {
        if !(mass > 0.0 && damping > 0.0 && stiffness > 0.0) {
            return Err(Error::InvalidInput(
                "second-order parameters must be positive".into(),
            ));
        }
        Ok(Self {
            mass,
            damping,
            stiffness,
        })
    }

    /// Position spectrum at angular frequency Ω for forcing power `p`.
    pub fn position(&self, omega: f64, p: f64) -> f64 {
        let resp = self.stiffness - self.mass * omega * omega;
        p / (resp * resp + self.damping * self.damping * omega * omega)
    }

    /// Velocity spectrum `Ω² |x̂(Ω)|²`.
    pub fn velocity(&self, omega: f64, p: f64) -> f64 {
        omega * omega * self.position(omega, p)
    }

    /// Resonant frequency `√(k/m)`: the maximum of the velocity spectrum
    /// under white forcing.
    pub fn resonant_frequency(&self) -> f64 {
        (self.stiffness / self.mass).sqrt()
    }

    /// Inverse quality factor `β/√(mk)`: full width at half maximum of the
    /// white-forced velocity spectrum in units of the resonant frequency.
    pub fn inverse_q(&self) -> f64 {
        self.damping / (self.mass * self.stiffness).sqrt()
    }

    /// Full width at half maximum of the white-forced velocity spectrum,
    /// located numerically by bisection on both flanks.
    pub fn velocity_fwhm_white(&self) -> f64 {
        let omega_res = self.resonant_frequency();
        let half = self.velocity(omega_res, 1.0) / 2.0;
        let solve = |mut lo: f64, mut hi: f64| {
            // velocity(lo) and velocity(hi) bracket the half level
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if (self.velocity(mid, 1.0) - half) * (self.velocity(lo, 1.0) - half) <= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            0.5 * (lo + hi)
        };
        let mut lo = omega_res;
        while self.velocity(lo, 1.0) > half && lo > 1e-12 {
            lo *= 0.5;
        }
        let left = solve(lo, omega_res);
        let mut hi = omega_res;
        while self.velocity(hi, 1.0) > half && hi.is_finite() {
            hi *= 2.0;
        }
        let right = solve(hi, omega_res);
        right - left
    }
}
