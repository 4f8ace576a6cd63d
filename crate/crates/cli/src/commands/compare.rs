use std::path::PathBuf;

use clap::Args;

use mode_sleuth::estimator::{compare_models, Candidate, FitOptions};
use mode_sleuth::Result;

use super::fit::ReportFormat;

#[derive(Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Candidate grid upper bound on real modes.
    #[arg(long)]
    pub max_real: usize,
    /// Candidate grid upper bound on complex modes.
    #[arg(long)]
    pub max_complex: usize,
    #[arg(long, default_value_t = 8)]
    pub starts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 150)]
    pub max_iters: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    pub format: ReportFormat,
}

pub fn run(args: CompareArgs) -> Result<()> {
    let (names, samples) = super::load_csv(&args.data)?;
    let mut candidates = Vec::new();
    for r in 0..=args.max_real {
        for c in 0..=args.max_complex {
            candidates.push(Candidate {
                n_real: r,
                n_complex: c,
            });
        }
    }
    let opts = FitOptions {
        starts: args.starts,
        max_iters: args.max_iters,
        seed: args.seed,
        ..FitOptions::default()
    };
    let posterior = compare_models(&candidates, names.len(), &samples, &opts)?;

    eprintln!("real  complex  log_z        bic          posterior");
    for c in &posterior.candidates {
        eprintln!(
            "{:<5} {:<8} {:<12} {:<12} {:.4}{}",
            c.candidate.n_real,
            c.candidate.n_complex,
            c.log_z.map(|z| format!("{z:.3}")).unwrap_or_else(|| "-".into()),
            c.fit
                .as_ref()
                .ok()
                .map(|f| format!("{:.3}", f.bic))
                .unwrap_or_else(|| "-".into()),
            c.posterior,
            if c.used_bic_fallback { "  (BIC)" } else { "" }
        );
    }
    if let Some(best) = posterior.best() {
        eprintln!(
            "best: {} real, {} complex",
            best.candidate.n_real, best.candidate.n_complex
        );
    }

    let report = match args.format {
        ReportFormat::Json => serde_json::to_string_pretty(&posterior.to_json_value())?,
        ReportFormat::Csv => {
            let mut out = String::from("n_real,n_complex,log_z,bic,posterior,used_bic_fallback\n");
            for c in &posterior.candidates {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    c.candidate.n_real,
                    c.candidate.n_complex,
                    c.log_z.map(|z| z.to_string()).unwrap_or_default(),
                    c.fit.as_ref().ok().map(|f| f.bic.to_string()).unwrap_or_default(),
                    c.posterior,
                    c.used_bic_fallback
                ));
            }
            out
        }
    };
    match &args.out {
        Some(path) => std::fs::write(path, report)?,
        None => println!("{report}"),
    }
    Ok(())
}
