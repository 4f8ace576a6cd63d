use std::path::PathBuf;

use clap::{Args, ValueEnum};

use mode_sleuth::estimator::{fit_mle, FitOptions, FitResult};
use mode_sleuth::{Error, Result};

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq)]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Args)]
pub struct FitArgs {
    /// Input CSV (`t,<ch1>,...`; empty cells are missing observations).
    #[arg(long)]
    pub data: PathBuf,
    /// Number of real modes.
    #[arg(long)]
    pub real: usize,
    /// Number of complex modes.
    #[arg(long)]
    pub complex: usize,
    #[arg(long, default_value_t = 8)]
    pub starts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub max_iters: usize,
    /// Fit report destination (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    pub format: ReportFormat,
}

pub fn run(args: FitArgs) -> Result<()> {
    let (names, samples) = super::load_csv(&args.data)?;
    let opts = FitOptions {
        starts: args.starts,
        max_iters: args.max_iters,
        seed: args.seed,
        ..FitOptions::default()
    };
    let fit = match fit_mle(args.real, args.complex, names.len(), &samples, None, &opts) {
        Ok(f) => f,
        Err(err) => {
            // leave a diagnostics file next to the intended report
            let diag = serde_json::json!({
                "error": err.to_string(),
                "data": args.data.display().to_string(),
                "family": {"real": args.real, "complex": args.complex},
                "starts": args.starts,
                "seed": args.seed,
            });
            let diag_path = args
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("fit-report.json"))
                .with_extension("diagnostics.json");
            std::fs::write(&diag_path, serde_json::to_string_pretty(&diag)?)?;
            eprintln!("fit failed; diagnostics written to {}", diag_path.display());
            return Err(err);
        }
    };

    print_summary(&fit, &names)?;
    let report = match args.format {
        ReportFormat::Json => serde_json::to_string_pretty(&fit.to_json_value())?,
        ReportFormat::Csv => report_csv(&fit),
    };
    match &args.out {
        Some(path) => std::fs::write(path, report)?,
        None => println!("{report}"),
    }
    Ok(())
}

fn print_summary(fit: &FitResult, names: &[String]) -> Result<()> {
    let model = &fit.model;
    let amps = model.amplitudes()?;
    eprintln!(
        "log evidence {:.4}  log posterior {:.4}  bic {:.4}  converged {}",
        fit.log_evidence, fit.log_posterior, fit.bic, fit.converged
    );
    eprintln!("mode      rate        freq        amplitude   shape");
    let b = model.shapes().matrix();
    for (i, &l) in model.spec().real_rates().iter().enumerate() {
        let shape: Vec<String> = (0..model.n_channels())
            .map(|c| format!("{:+.3}", b[(c, i)]))
            .collect();
        eprintln!(
            "real {i}    λ={l:<9.4} -           {:<11.4} [{}]",
            amps[i],
            shape.join(", ")
        );
    }
    let nr = model.spec().n_real();
    for (m, &(a, w)) in model.spec().complex_modes().iter().enumerate() {
        let col = nr + 2 * m;
        let shape: Vec<String> = (0..model.n_channels())
            .map(|c| format!("{:+.3}{:+.3}i", b[(c, col)], b[(c, col + 1)]))
            .collect();
        eprintln!(
            "complex {m} α={a:<9.4} ω={w:<9.4} {:<11.4} [{}]",
            amps[nr + m],
            shape.join(", ")
        );
    }
    if names.len() != model.n_channels() {
        return Err(Error::InvalidInput("channel count mismatch".into()));
    }
    Ok(())
}

fn report_csv(fit: &FitResult) -> String {
    let mut out = String::from("key,value\n");
    out.push_str(&format!("log_evidence,{}\n", fit.log_evidence));
    out.push_str(&format!("log_posterior,{}\n", fit.log_posterior));
    out.push_str(&format!(
        "laplace_log_z,{}\n",
        fit.laplace_log_z.map(|v| v.to_string()).unwrap_or_default()
    ));
    out.push_str(&format!("bic,{}\n", fit.bic));
    out.push_str(&format!("converged,{}\n", fit.converged));
    for (i, v) in fit.theta_hat.iter().enumerate() {
        out.push_str(&format!("theta_{i},{v}\n"));
    }
    for (i, v) in fit.posterior_sd.iter().enumerate() {
        out.push_str(&format!("posterior_sd_{i},{v}\n"));
    }
    out
}
