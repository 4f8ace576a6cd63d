use std::path::PathBuf;

use clap::Args;

use mode_sleuth::spectral::{hann_window, loglog_slope, periodogram, uniform_step, welch};
use mode_sleuth::{Error, Result};

#[derive(Args)]
pub struct SpectrumArgs {
    /// Input CSV with uniform sampling.
    #[arg(long)]
    pub data: PathBuf,
    /// Channel name or index (default: first channel).
    #[arg(long)]
    pub channel: Option<String>,
    /// Welch segment count; omitted means one raw Hann-windowed window.
    #[arg(long)]
    pub welch: Option<usize>,
    /// Slope band `lo,hi` in Hz; repeatable.
    #[arg(long, value_delimiter = ',', action = clap::ArgAction::Append)]
    pub band: Vec<f64>,
    /// Periodogram CSV destination (freq_hz, power); stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: SpectrumArgs) -> Result<()> {
    let (names, samples) = super::load_csv(&args.data)?;
    let channel = match &args.channel {
        None => 0,
        Some(key) => names
            .iter()
            .position(|n| n == key)
            .or_else(|| key.parse::<usize>().ok().filter(|&i| i < names.len()))
            .ok_or_else(|| Error::InvalidInput(format!("unknown channel {key:?}")))?,
    };

    let mut times = Vec::new();
    let mut values = Vec::new();
    for s in &samples {
        if let Some(pos) = s.channels.iter().position(|&c| c == channel) {
            times.push(s.t);
            values.push(s.values[pos]);
        }
    }
    let dt = uniform_step(&times)?;

    let pg = match args.welch {
        Some(segments) => welch(&values, dt, segments, 0.5)?,
        None => periodogram(&values, dt, &hann_window(values.len()))?,
    };

    for pair in args.band.chunks(2) {
        if pair.len() != 2 {
            return Err(Error::InvalidInput("band needs lo,hi".into()));
        }
        let fit = loglog_slope(&pg, (pair[0], pair[1]))?;
        eprintln!(
            "band [{:.5}, {:.5}] Hz: slope {:.4} ± {:.4} over {} bins",
            pair[0], pair[1], fit.slope, fit.stderr, fit.n_bins
        );
    }

    let mut report = String::from("freq_hz,power\n");
    for (f, p) in pg.freqs.iter().zip(&pg.power) {
        report.push_str(&format!("{f},{p}\n"));
    }
    match &args.out {
        Some(path) => std::fs::write(path, report)?,
        None => print!("{report}"),
    }
    Ok(())
}
