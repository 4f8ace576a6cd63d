use std::io::{BufRead, Write};
use std::path::PathBuf;

use clap::Args;

use mode_sleuth::data::{parse_stream_record, ChannelSample};
use mode_sleuth::estimator::{track_stream, MeanStructure, ParamChart, StepRule, TrackOptions};
use mode_sleuth::model::ModeModel;
use mode_sleuth::{Error, Result};

#[derive(Args)]
pub struct StreamArgs {
    /// Starting mode model (format mode-model/1).
    #[arg(long)]
    pub model_json: PathBuf,
    /// Forgetting rate λ (1/time). Choose several multiples of the slowest
    /// expected mode timescale.
    #[arg(long)]
    pub forget: f64,
    /// Input records `t,<channel>=<value>[,...]`; `-` or omitted reads
    /// standard input.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Channel names, in model order; defaults to y0,y1,...
    #[arg(long, value_delimiter = ',')]
    pub channels: Vec<String>,
    /// Damping of the preconditioned tracker step.
    #[arg(long, default_value_t = 1.0)]
    pub step: f64,
    /// Records before stepping starts.
    #[arg(long, default_value_t = 50)]
    pub warmup: usize,
}

pub fn run(args: StreamArgs) -> Result<()> {
    let model = ModeModel::from_json_str(&std::fs::read_to_string(&args.model_json)?)?;
    let chart = ParamChart::for_model(&model, MeanStructure::Free, true)?;
    let names: Vec<String> = if args.channels.is_empty() {
        (0..model.n_channels()).map(|i| format!("y{i}")).collect()
    } else {
        if args.channels.len() != model.n_channels() {
            return Err(Error::InvalidInput(format!(
                "--channels lists {} names, model has {} channels",
                args.channels.len(),
                model.n_channels()
            )));
        }
        args.channels.clone()
    };

    let reader: Box<dyn BufRead> = match &args.input {
        Some(p) if p.as_os_str() != "-" => {
            Box::new(std::io::BufReader::new(std::fs::File::open(p)?))
        }
        _ => Box::new(std::io::BufReader::new(std::io::stdin())),
    };

    let mut skipped = 0usize;
    let records = reader.lines().filter_map(|line| {
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                eprintln!("warning: read error, stopping: {e}");
                return None;
            }
        };
        if line.trim().is_empty() {
            return None;
        }
        match parse_line(&line, &names) {
            Ok(sample) => Some(sample),
            Err(e) => {
                eprintln!("warning: skipping record: {e}");
                skipped += 1;
                None
            }
        }
    });

    let opts = TrackOptions {
        forget: args.forget,
        step_rule: StepRule::Fixed(args.step),
        warmup: args.warmup,
        max_step: 0.01,
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let summary = track_stream(&model, &chart, None, &opts, records, |pt| {
        let _ = writeln!(out, "{}", pt.to_json_value());
    })?;
    eprintln!(
        "processed {} records ({} skipped, {} rejected steps); final L_disc {:.4}",
        summary.records, skipped, summary.rejected_steps, summary.discounted
    );
    Ok(())
}

fn parse_line(line: &str, names: &[String]) -> Result<ChannelSample> {
    let (t, pairs) = parse_stream_record(line)?;
    let mut channels = Vec::with_capacity(pairs.len());
    let mut values = Vec::with_capacity(pairs.len());
    for (key, value) in pairs {
        let idx = names
            .iter()
            .position(|n| *n == key)
            .or_else(|| key.parse::<usize>().ok().filter(|&i| i < names.len()))
            .ok_or_else(|| Error::InvalidScheme(format!("unknown channel {key:?}")))?;
        channels.push(idx);
        values.push(value);
    }
    Ok(ChannelSample { t, channels, values })
}
