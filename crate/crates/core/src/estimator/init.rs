//! Spectral initialization for the mode-model optimizer.
//!
//! Complex-mode frequencies start at Welch-periodogram peaks; dampings at
//! the half-width at half maximum of each peak (the damping ratio is the
//! relative halfwidth of the resonance); shapes at the dominant eigenvector
//! of the cross-spectral matrix at the peak; real-mode rates at the
//! low-frequency spectral knee. Missing peaks fall back to random
//! log-spaced frequencies, which is reported in the warnings.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::data::ChannelSample;
use crate::error::{Error, Result};
use crate::matfun::PsdFactor;
use crate::model::{MeasNoise, ModeModel, ModeShapes, ModeSpec, OMEGA_MIN};
use crate::spectral::hann_window;

pub struct InitOptions {
    pub seed: u64,
    pub welch_segments: usize,
    pub peak_threshold: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            welch_segments: 8,
            peak_threshold: 5.0,
        }
    }
}

struct SpectralSummary {
    freqs: Vec<f64>,
    avg_power: Vec<f64>,
    /// cross-spectral accumulators per bin: upper triangle of the Hermitian
    /// matrix, stored dense
    cross: Vec<DMatrix<Complex<f64>>>,
    channel_var: Vec<f64>,
    channel_mean: Vec<f64>,
    duration: f64,
    dt: f64,
}

/// Regrid irregularly observed channels onto the median-spacing uniform
/// grid by linear interpolation.
fn regrid(samples: &[ChannelSample], n_channels: usize) -> Result<(Vec<Vec<f64>>, f64)> {
    let mut per_channel: Vec<Vec<(f64, f64)>> = vec![Vec::new(); n_channels];
    let mut times: Vec<f64> = Vec::new();
    for s in samples {
        times.push(s.t);
        for (&c, &v) in s.channels.iter().zip(&s.values) {
            if c >= n_channels {
                return Err(Error::InvalidScheme(format!("channel {c} out of range")));
            }
            per_channel[c].push((s.t, v));
        }
    }
    times.sort_by(|a, b| a.total_cmp(b));
    times.dedup();
    if times.len() < 64 {
        return Err(Error::InvalidInput(format!(
            "initialization needs at least 64 distinct times, got {}",
            times.len()
        )));
    }
    let mut diffs: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    diffs.sort_by(|a, b| a.total_cmp(b));
    let dt = diffs[diffs.len() / 2];
    let t0 = times[0];
    let t1 = *times.last().unwrap();
    let len = ((t1 - t0) / dt).floor() as usize + 1;

    let mut grids = Vec::with_capacity(n_channels);
    for ch in per_channel.iter_mut() {
        ch.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut series = Vec::with_capacity(len);
        if ch.len() < 2 {
            let v = ch.first().map(|p| p.1).unwrap_or(0.0);
            series.resize(len, v);
        } else {
            let mut at = 0usize;
            for i in 0..len {
                let t = t0 + i as f64 * dt;
                while at + 1 < ch.len() && ch[at + 1].0 <= t {
                    at += 1;
                }
                let v = if at + 1 >= ch.len() {
                    ch[at].1
                } else {
                    let (ta, va) = ch[at];
                    let (tb, vb) = ch[at + 1];
                    if t <= ta {
                        va
                    } else {
                        va + (vb - va) * (t - ta) / (tb - ta)
                    }
                };
                series.push(v);
            }
        }
        grids.push(series);
    }
    Ok((grids, dt))
}

fn spectral_summary(
    grids: &[Vec<f64>],
    dt: f64,
    segments: usize,
) -> Result<SpectralSummary> {
    let n = grids[0].len();
    let m = grids.len();
    let denom = 1.0 + (segments as f64 - 1.0) * 0.5;
    let mut seg_len = ((n as f64 / denom).floor() as usize).min(n);
    if seg_len < 64 {
        seg_len = n.min(n);
    }
    if seg_len < 64 {
        return Err(Error::InvalidInput("too little data for spectra".into()));
    }
    let hop = (seg_len / 2).max(1);
    let window = hann_window(seg_len);
    let n_bins = seg_len / 2 + 1;

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(seg_len);

    let channel_mean: Vec<f64> = grids
        .iter()
        .map(|g| g.iter().sum::<f64>() / g.len() as f64)
        .collect();
    let channel_var: Vec<f64> = grids
        .iter()
        .zip(&channel_mean)
        .map(|(g, &mu)| g.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / g.len() as f64)
        .collect();

    let mut avg_power = vec![0.0; n_bins];
    let mut cross = vec![DMatrix::<Complex<f64>>::zeros(m, m); n_bins];
    let mut count = 0usize;
    let mut start = 0usize;
    while start + seg_len <= n {
        let mut spectra: Vec<Vec<Complex<f64>>> = Vec::with_capacity(m);
        for (g, &mu) in grids.iter().zip(&channel_mean) {
            let mut buf: Vec<Complex<f64>> = g[start..start + seg_len]
                .iter()
                .zip(&window)
                .map(|(&x, &w)| Complex::new((x - mu) * w, 0.0))
                .collect();
            fft.process(&mut buf);
            buf.truncate(n_bins);
            spectra.push(buf);
        }
        for b in 0..n_bins {
            for a in 0..m {
                avg_power[b] += spectra[a][b].norm_sqr();
                for c in 0..m {
                    cross[b][(a, c)] += spectra[a][b] * spectra[c][b].conj();
                }
            }
        }
        count += 1;
        start += hop;
    }
    if count == 0 {
        return Err(Error::InvalidInput("no full spectral segment fits".into()));
    }
    for p in &mut avg_power {
        *p /= (count * m) as f64;
    }
    let freqs: Vec<f64> = (0..n_bins).map(|k| k as f64 / (seg_len as f64 * dt)).collect();
    Ok(SpectralSummary {
        freqs,
        avg_power,
        cross,
        channel_var,
        channel_mean,
        duration: n as f64 * dt,
        dt,
    })
}

/// Interior local maxima above `threshold ×` the median power, strongest
/// first.
fn find_peaks(summary: &SpectralSummary, threshold: f64) -> Vec<usize> {
    let p = &summary.avg_power;
    let mut sorted = p[1..].to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median = sorted[sorted.len() / 2];
    let mut peaks: Vec<usize> = (2..p.len().saturating_sub(1))
        .filter(|&i| p[i] > p[i - 1] && p[i] >= p[i + 1] && p[i] > threshold * median)
        .collect();
    peaks.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    // drop peaks adjacent to an already kept stronger one
    let mut kept: Vec<usize> = Vec::new();
    for i in peaks {
        if kept.iter().all(|&k| (k as i64 - i as i64).unsigned_abs() > 2) {
            kept.push(i);
        }
    }
    kept
}

/// Half-width at half maximum around a peak bin, in Hz on each side, by
/// linear interpolation of the crossing.
fn half_width(summary: &SpectralSummary, peak: usize) -> f64 {
    let p = &summary.avg_power;
    let f = &summary.freqs;
    let half = p[peak] / 2.0;
    let df = f[1] - f[0];

    let mut left = f[peak] - 0.5 * df;
    for i in (1..peak).rev() {
        if p[i] < half {
            let frac = (half - p[i]) / (p[i + 1] - p[i]);
            left = f[i] + frac * df;
            break;
        }
        left = f[i] - 0.5 * df;
    }
    let mut right = f[peak] + 0.5 * df;
    for i in peak + 1..p.len() {
        if p[i] < half {
            let frac = (p[i - 1] - half) / (p[i - 1] - p[i]);
            right = f[i - 1] + frac * df;
            break;
        }
        right = f[i] + 0.5 * df;
    }
    ((right - left) / 2.0).max(df / 4.0)
}

/// Dominant eigenvector of a Hermitian matrix by power iteration.
fn dominant_eigenvector(h: &DMatrix<Complex<f64>>) -> Vec<Complex<f64>> {
    let m = h.nrows();
    let mut v: Vec<Complex<f64>> = (0..m)
        .map(|i| Complex::new(1.0 + 0.01 * i as f64, 0.005 * i as f64))
        .collect();
    for _ in 0..200 {
        let mut next = vec![Complex::new(0.0, 0.0); m];
        for a in 0..m {
            for b in 0..m {
                next[a] += h[(a, b)] * v[b];
            }
        }
        let norm = next.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        for z in &mut next {
            *z /= norm;
        }
        v = next;
    }
    v
}

/// Spectral-knee estimate for real-mode rates: angular frequency where the
/// averaged power first falls to half its low-frequency plateau.
fn knee_rate(summary: &SpectralSummary) -> Option<f64> {
    let p = &summary.avg_power;
    let n_low = (p.len() / 10).max(2);
    let plateau = p[1..=n_low].iter().sum::<f64>() / n_low as f64;
    for i in 1..p.len() {
        if p[i] < plateau / 2.0 {
            return Some(2.0 * std::f64::consts::PI * summary.freqs[i]);
        }
    }
    None
}

/// Build a starting model from the data spectra. Returns the model plus
/// warnings for every fallback taken.
pub fn init_heuristic(
    samples: &[ChannelSample],
    n_channels: usize,
    n_real: usize,
    n_complex: usize,
    opts: &InitOptions,
) -> Result<(ModeModel, Vec<String>)> {
    if samples.len() < 64 {
        return Err(Error::InvalidInput(format!(
            "initialization needs at least 64 records, got {}",
            samples.len()
        )));
    }
    let mut warnings = Vec::new();
    let (grids, dt) = regrid(samples, n_channels)?;
    let summary = spectral_summary(&grids, dt, opts.welch_segments)?;
    let mut rng = ChaCha12Rng::seed_from_u64(opts.seed);

    let peaks = find_peaks(&summary, opts.peak_threshold);

    // complex modes from peaks, random log-spaced fallbacks beyond them
    let mut complex_modes: Vec<(f64, f64)> = Vec::with_capacity(n_complex);
    let mut complex_shapes: Vec<Vec<Complex<f64>>> = Vec::with_capacity(n_complex);
    for mi in 0..n_complex {
        if let Some(&bin) = peaks.get(mi) {
            let omega = 2.0 * std::f64::consts::PI * summary.freqs[bin];
            let alpha = (2.0 * std::f64::consts::PI * half_width(&summary, bin))
                .clamp(1e-4 * omega, 2.0 * omega);
            complex_modes.push((alpha, omega.max(OMEGA_MIN)));
            complex_shapes.push(dominant_eigenvector(&summary.cross[bin]));
        } else {
            let f_lo = 4.0 / summary.duration;
            let f_hi = 0.25 / summary.dt;
            let u: f64 = rng.random_range(0.0..1.0);
            let f = f_lo * (f_hi / f_lo).powf(u);
            let omega = (2.0 * std::f64::consts::PI * f).max(OMEGA_MIN);
            warnings.push(format!(
                "no spectral peak for complex mode {mi}; random init at omega={omega:.4}"
            ));
            complex_modes.push((0.2 * omega, omega));
            complex_shapes.push((0..n_channels).map(|_| Complex::new(1.0, 0.0)).collect());
        }
    }

    // real modes from the low-frequency knee, geometric spread for extras
    let mut real_rates: Vec<f64> = Vec::with_capacity(n_real);
    if n_real > 0 {
        let base = match knee_rate(&summary) {
            Some(k) => k,
            None => {
                warnings.push("no spectral knee; real rates from record span".to_string());
                8.0 * std::f64::consts::PI / summary.duration
            }
        };
        for r in 0..n_real {
            real_rates.push(base * 3f64.powi(r as i32));
        }
    }

    // real shapes: leading eigenvectors of the zero-lag sample covariance
    let mut cov0 = DMatrix::<f64>::zeros(n_channels, n_channels);
    for a in 0..n_channels {
        for b in 0..n_channels {
            let (ga, gb) = (&grids[a], &grids[b]);
            let (ma, mb) = (summary.channel_mean[a], summary.channel_mean[b]);
            cov0[(a, b)] = ga
                .iter()
                .zip(gb)
                .map(|(&x, &y)| (x - ma) * (y - mb))
                .sum::<f64>()
                / ga.len() as f64;
        }
    }
    let eig = nalgebra::SymmetricEigen::new(cov0.clone());
    let mut order: Vec<usize> = (0..n_channels).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));

    let spec = ModeSpec::new(real_rates.clone(), complex_modes.clone())?;
    let n_state = spec.state_dim();
    let mut b = DMatrix::<f64>::zeros(n_channels, n_state);
    let mut pins = Vec::with_capacity(n_real + n_complex);
    for r in 0..n_real {
        let v = eig.eigenvectors.column(order[r.min(n_channels - 1)]);
        let pin = (0..n_channels)
            .max_by(|&i, &j| v[i].abs().total_cmp(&v[j].abs()))
            .unwrap();
        let scale = v[pin];
        for i in 0..n_channels {
            b[(i, r)] = if scale.abs() > 1e-12 { v[i] / scale } else { 0.0 };
        }
        b[(pin, r)] = 1.0;
        pins.push(pin);
    }
    for (mi, shape) in complex_shapes.iter().enumerate() {
        let col = n_real + 2 * mi;
        let pin = (0..n_channels)
            .max_by(|&i, &j| shape[i].norm().total_cmp(&shape[j].norm()))
            .unwrap();
        let scale = shape[pin];
        for i in 0..n_channels {
            let z = if scale.norm() > 1e-12 {
                shape[i] / scale
            } else {
                Complex::new(if i == pin { 1.0 } else { 0.0 }, 0.0)
            };
            // the positive-frequency content of each channel carries the
            // conjugate shape, so flip the imaginary part going back to
            // the rotation-block columns
            b[(i, col)] = z.re;
            b[(i, col + 1)] = -z.im;
        }
        b[(pin, col)] = 1.0;
        b[(pin, col + 1)] = 0.0;
        pins.push(pin);
    }
    let shapes = ModeShapes::new(b, pins, &spec)?;

    // driving noise: split the mean channel variance across modes, invert
    // the stationary-variance relation per block
    let mean_var = (summary.channel_var.iter().sum::<f64>() / n_channels as f64).max(1e-12);
    let share = mean_var / (n_real + n_complex).max(1) as f64;
    let mut lam = DMatrix::<f64>::zeros(n_state, n_state);
    for (r, &l) in real_rates.iter().enumerate() {
        lam[(r, r)] = (2.0 * l * share).sqrt();
    }
    for (mi, &(a, _)) in complex_modes.iter().enumerate() {
        let c = n_real + 2 * mi;
        let q = (2.0 * a * share).sqrt();
        lam[(c, c)] = q;
        lam[(c + 1, c + 1)] = q;
    }

    let means = DVector::from_fn(n_channels, |i, _| summary.channel_mean[i]);
    // with no modes the measurement noise is the only variance carrier
    let meas_frac = if n_real + n_complex == 0 { 1.0 } else { 0.05 };
    let meas_vars: Vec<f64> = summary
        .channel_var
        .iter()
        .map(|v| (meas_frac * v).max(1e-8))
        .collect();

    let model = ModeModel::new(
        spec,
        shapes,
        PsdFactor::new(lam)?,
        means,
        MeasNoise::diagonal(&meas_vars)?,
    )?
    .canonicalize()?;
    Ok((model, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LtiSystem;
    use crate::sim::{sample_path, PathInit};

    fn simulate_complex_mode(
        alpha: f64,
        omega: f64,
        dt: f64,
        n: usize,
        seed: u64,
    ) -> Vec<ChannelSample> {
        let spec = ModeSpec::new(vec![], vec![(alpha, omega)]).unwrap();
        let mut b = DMatrix::zeros(2, 2);
        b[(0, 0)] = 1.0;
        b[(1, 0)] = 0.6;
        b[(1, 1)] = -0.3;
        let shapes = ModeShapes::new(b.clone(), vec![0], &spec).unwrap();
        let q = 2.0 * alpha; // unit mode variance
        let lam = crate::matfun::cholesky_psd(
            &(q * DMatrix::identity(2, 2)),
            1e-12,
        )
        .unwrap();
        let model = ModeModel::new(
            spec,
            shapes,
            lam,
            DVector::zeros(2),
            MeasNoise::diagonal(&[1e-4, 1e-4]).unwrap(),
        )
        .unwrap();
        let (sys, bmat, _) = model.realize().unwrap();
        let times: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();
        let path = sample_path(&sys, &times, &PathInit::Stationary, seed).unwrap();
        path.times()
            .iter()
            .zip(path.states())
            .map(|(&t, x)| {
                let y = &bmat * x;
                ChannelSample::full(t, vec![y[0], y[1]])
            })
            .collect()
    }

    #[test]
    fn recovers_single_complex_mode_frequency() {
        let samples = simulate_complex_mode(0.1, 3.0, 0.05, 5000, 77);
        let (model, warnings) = init_heuristic(&samples, 2, 0, 1, &InitOptions::default()).unwrap();
        assert!(warnings.is_empty(), "unexpected warnings: {warnings:?}");
        let (_, omega) = model.spec().complex_modes()[0];
        assert!(
            (omega - 3.0).abs() < 0.3,
            "initialized omega {omega}, expected near 3"
        );
    }

    #[test]
    fn white_noise_takes_random_path() {
        // iid noise only: no resonant peak should survive the threshold
        let sys = LtiSystem::new(
            DMatrix::from_row_slice(1, 1, &[-40.0]),
            DMatrix::from_row_slice(1, 1, &[80.0]),
        )
        .unwrap();
        let times: Vec<f64> = (0..2000).map(|i| i as f64 * 0.5).collect();
        let path = sample_path(&sys, &times, &PathInit::Stationary, 3).unwrap();
        let samples: Vec<ChannelSample> = path
            .times()
            .iter()
            .zip(path.states())
            .map(|(&t, x)| ChannelSample::full(t, vec![x[0]]))
            .collect();
        let (_, warnings) = init_heuristic(&samples, 1, 0, 1, &InitOptions::default()).unwrap();
        assert!(
            warnings.iter().any(|w| w.contains("random init")),
            "expected the random fallback, got {warnings:?}"
        );
    }

    #[test]
    fn two_separated_modes_in_order() {
        let spec = ModeSpec::new(vec![], vec![(0.05, 2.0), (0.08, 8.0)]).unwrap();
        let mut b = DMatrix::zeros(2, 4);
        b[(0, 0)] = 1.0;
        b[(1, 2)] = 1.0;
        b[(1, 0)] = 0.3;
        b[(0, 2)] = 0.4;
        let shapes = ModeShapes::new(b.clone(), vec![0, 1], &spec).unwrap();
        let mut lam = DMatrix::zeros(4, 4);
        for (mi, &(a, _)) in spec.complex_modes().iter().enumerate() {
            let q = (2.0 * a).sqrt();
            lam[(2 * mi, 2 * mi)] = q;
            lam[(2 * mi + 1, 2 * mi + 1)] = q;
        }
        let model = ModeModel::new(
            spec,
            shapes,
            PsdFactor::new(lam).unwrap(),
            DVector::zeros(2),
            MeasNoise::diagonal(&[1e-4, 1e-4]).unwrap(),
        )
        .unwrap();
        let (sys, bmat, _) = model.realize().unwrap();
        let times: Vec<f64> = (0..8000).map(|i| i as f64 * 0.04).collect();
        let path = sample_path(&sys, &times, &PathInit::Stationary, 5).unwrap();
        let samples: Vec<ChannelSample> = path
            .times()
            .iter()
            .zip(path.states())
            .map(|(&t, x)| {
                let y = &bmat * x;
                ChannelSample::full(t, vec![y[0], y[1]])
            })
            .collect();

        let (init, _) = init_heuristic(&samples, 2, 0, 2, &InitOptions::default()).unwrap();
        let mut omegas: Vec<f64> = init
            .spec()
            .complex_modes()
            .iter()
            .map(|&(_, w)| w)
            .collect();
        omegas.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(
            (omegas[0] - 2.0).abs() / 2.0 < 0.2,
            "first mode {omegas:?}"
        );
        assert!(
            (omegas[1] - 8.0).abs() / 8.0 < 0.2,
            "second mode {omegas:?}"
        );
    }
}
