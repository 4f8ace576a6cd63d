//! Timestamped channel samples and their CSV representation.
//!
//! CSV layout: header `t,<ch1>,<ch2>,...`, one row per time, missing
//! observation entries as empty fields, `\n` line endings.

use std::io::{BufRead, BufReader, Read, Write};

use crate::error::{Error, Result};

/// A partial observation of named channels at one time: `channels` holds
/// the observed channel indices (into some naming vector), `values` the
/// corresponding measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample {
    pub t: f64,
    pub channels: Vec<usize>,
    pub values: Vec<f64>,
}

impl ChannelSample {
    pub fn full(t: f64, values: Vec<f64>) -> Self {
        Self {
            t,
            channels: (0..values.len()).collect(),
            values,
        }
    }
}

/// Write samples as CSV with the given channel names.
pub fn write_channel_csv<W: Write>(
    w: &mut W,
    names: &[String],
    samples: &[ChannelSample],
) -> Result<()> {
    write!(w, "t")?;
    for name in names {
        write!(w, ",{name}")?;
    }
    writeln!(w)?;
    for s in samples {
        let mut row: Vec<Option<f64>> = vec![None; names.len()];
        for (&c, &v) in s.channels.iter().zip(&s.values) {
            if c >= names.len() {
                return Err(Error::InvalidScheme(format!(
                    "channel index {c} out of range for {} names",
                    names.len()
                )));
            }
            row[c] = Some(v);
        }
        write!(w, "{}", fmt_f64(s.t))?;
        for cell in row {
            match cell {
                Some(v) => write!(w, ",{}", fmt_f64(v))?,
                None => write!(w, ",")?,
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

fn fmt_f64(v: f64) -> String {
    // round-trippable without trailing noise on simple values
    let s = format!("{v}");
    if s.parse::<f64>() == Ok(v) {
        s
    } else {
        format!("{v:.17e}")
    }
}

/// Read a channel CSV; returns the channel names and the samples (rows with
/// no observed value are skipped).
pub fn read_channel_csv<R: Read>(r: R) -> Result<(Vec<String>, Vec<ChannelSample>)> {
    let mut lines = BufReader::new(r).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidInput("empty CSV".into()))??;
    let mut fields = header.split(',');
    match fields.next() {
        Some("t") => {}
        other => {
            return Err(Error::InvalidInput(format!(
                "CSV header must start with 't', got {other:?}"
            )))
        }
    }
    let names: Vec<String> = fields.map(|s| s.trim().to_string()).collect();
    if names.is_empty() {
        return Err(Error::InvalidInput("CSV has no channel columns".into()));
    }

    let mut samples = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let t: f64 = parts
            .next()
            .unwrap()
            .trim()
            .parse()
            .map_err(|e| Error::InvalidInput(format!("row {}: bad time: {e}", lineno + 2)))?;
        let mut channels = Vec::new();
        let mut values = Vec::new();
        for (c, cell) in parts.enumerate() {
            let cell = cell.trim();
            if cell.is_empty() {
                continue;
            }
            if c >= names.len() {
                return Err(Error::InvalidInput(format!(
                    "row {}: more cells than channels",
                    lineno + 2
                )));
            }
            let v: f64 = cell.parse().map_err(|e| {
                Error::InvalidInput(format!("row {}: bad value {cell:?}: {e}", lineno + 2))
            })?;
            channels.push(c);
            values.push(v);
        }
        if !channels.is_empty() {
            samples.push(ChannelSample { t, channels, values });
        }
    }
    Ok((names, samples))
}

/// Sort samples by time and merge entries with exactly equal timestamps
/// into single samples (later duplicates of a channel win).
pub fn sort_and_merge(samples: &[ChannelSample]) -> Vec<ChannelSample> {
    let mut sorted: Vec<ChannelSample> = samples.to_vec();
    sorted.sort_by(|a, b| a.t.total_cmp(&b.t));
    let mut out: Vec<ChannelSample> = Vec::with_capacity(sorted.len());
    for s in sorted {
        match out.last_mut() {
            Some(last) if last.t == s.t => {
                for (&c, &v) in s.channels.iter().zip(&s.values) {
                    if let Some(pos) = last.channels.iter().position(|&x| x == c) {
                        last.values[pos] = v;
                    } else {
                        last.channels.push(c);
                        last.values.push(v);
                    }
                }
            }
            _ => out.push(s),
        }
    }
    out
}

/// Parse one streaming record `t,<channel>=<value>[,<channel>=<value>...]`.
/// Channel keys are returned as written; the caller resolves them to
/// indices.
pub fn parse_stream_record(line: &str) -> Result<(f64, Vec<(String, f64)>)> {
    let mut parts = line.trim().split(',');
    let t: f64 = parts
        .next()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::InvalidInput("empty record".into()))?
        .trim()
        .parse()
        .map_err(|e| Error::InvalidInput(format!("bad record time: {e}")))?;
    let mut pairs = Vec::new();
    for item in parts {
        let item = item.trim();
        if item.is_empty() {
            continue;
        }
        let (key, val) = item
            .split_once('=')
            .ok_or_else(|| Error::InvalidInput(format!("expected <channel>=<value>, got {item:?}")))?;
        let v: f64 = val
            .trim()
            .parse()
            .map_err(|e| Error::InvalidInput(format!("bad value for {key:?}: {e}")))?;
        pairs.push((key.trim().to_string(), v));
    }
    if pairs.is_empty() {
        return Err(Error::InvalidInput("record has no channel values".into()));
    }
    Ok((t, pairs))
}
