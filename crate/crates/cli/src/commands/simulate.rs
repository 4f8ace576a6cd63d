use std::path::PathBuf;

use clap::{Args, ValueEnum};
use nalgebra::DMatrix;

use mode_sleuth::data::{write_channel_csv, ChannelSample};
use mode_sleuth::grid::GridParams;
use mode_sleuth::kalman::ObsSpec;
use mode_sleuth::model::{KernelParams, ModeModel};
use mode_sleuth::sim::{observe_path, sample_path, PathInit, SimMetadata};
use mode_sleuth::{Error, Result};

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BuiltinModel {
    Ou,
    Langevin,
    Fou,
    Mode,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Builtin model family; `mode` reads a mode-model JSON from --model-json.
    #[arg(long, value_enum, conflicts_with = "grid")]
    model: Option<BuiltinModel>,
    /// Grid config JSON (format grid-model/1).
    #[arg(long)]
    grid: Option<PathBuf>,
    /// PMU node list for grid observation, e.g. `--pmus 1,3`.
    #[arg(long, value_delimiter = ',')]
    pmus: Vec<usize>,
    /// Mode-model JSON (format mode-model/1), for `--model mode`.
    #[arg(long)]
    model_json: Option<PathBuf>,

    /// OU decay rate μ.
    #[arg(long, default_value_t = 1.0)]
    mu: f64,
    /// Forcing amplitude σ.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Langevin/FOU mass.
    #[arg(long, default_value_t = 1.0)]
    mass: f64,
    /// Langevin damping β.
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Langevin stiffness k.
    #[arg(long, default_value_t = 1.0)]
    k: f64,
    /// FOU frequency damping γ (with unit mass this is Γ).
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    /// FOU imbalance relaxation J.
    #[arg(long, default_value_t = 1.0)]
    j: f64,

    /// Sample spacing.
    #[arg(long)]
    dt: f64,
    /// Number of samples.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Gaussian measurement noise added to every observed channel.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Output CSV path; a `<out>.meta.json` sidecar records model and seed.
    #[arg(long)]
    out: PathBuf,
}

pub fn run(args: SimulateArgs) -> Result<()> {
    if args.n == 0 || !(args.dt > 0.0) {
        return Err(Error::InvalidInput("need n > 0 and dt > 0".into()));
    }
    let times: Vec<f64> = (0..args.n).map(|i| i as f64 * args.dt).collect();

    // state system, observation selector, channel names, model description
    let (sys, z, names, model_desc) = match (&args.model, &args.grid) {
        (Some(BuiltinModel::Mode), None) => {
            let path = args.model_json.as_ref().ok_or_else(|| {
                Error::InvalidInput("--model mode requires --model-json".into())
            })?;
            let model = ModeModel::from_json_str(&std::fs::read_to_string(path)?)?;
            let desc = model.to_json_value();
            let (sys, b, _) = model.realize()?;
            let names = (0..model.n_channels()).map(|i| format!("y{i}")).collect();
            (sys, b, names, desc)
        }
        (Some(builtin), None) => {
            let params = match builtin {
                BuiltinModel::Ou => KernelParams::Ou {
                    mu: args.mu,
                    sigma: args.sigma,
                },
                BuiltinModel::Langevin => KernelParams::Langevin {
                    mass: args.mass,
                    damping: args.beta,
                    stiffness: args.k,
                    sigma: args.sigma,
                },
                BuiltinModel::Fou => KernelParams::Fou {
                    mass: args.mass,
                    damping: args.gamma,
                    relaxation: args.j,
                    sigma: args.sigma,
                },
                BuiltinModel::Mode => unreachable!(),
            };
            let (sys, idx) = params.realize()?;
            let mut z = DMatrix::zeros(1, sys.dim());
            z[(0, idx)] = 1.0;
            let desc = serde_json::json!({ "builtin": format!("{params:?}") });
            (sys, z, vec!["x".to_string()], desc)
        }
        (None, Some(grid_path)) => {
            let params = GridParams::from_json_str(&std::fs::read_to_string(grid_path)?)?;
            let jgs = params.assemble_joint()?;
            let pmus: Vec<usize> = if args.pmus.is_empty() {
                (0..params.n_nodes()).collect()
            } else {
                args.pmus.clone()
            };
            let (z, names) = jgs.pmu_selector(&params.tree, &pmus)?;
            let desc = serde_json::json!({ "grid": params.to_json_value(), "pmus": pmus });
            (jgs.joint_system().clone(), z, names, desc)
        }
        _ => {
            return Err(Error::InvalidInput(
                "exactly one of --model or --grid is required".into(),
            ))
        }
    };

    let path = sample_path(&sys, &times, &PathInit::Stationary, args.seed)?;
    let d = z.nrows();
    let noise_cov = DMatrix::<f64>::identity(d, d) * (args.noise * args.noise);
    let scheme: Vec<ObsSpec> = times
        .iter()
        .map(|&t| {
            ObsSpec::new(
                t,
                z.clone(),
                nalgebra::DVector::zeros(d),
                noise_cov.clone(),
            )
        })
        .collect::<Result<_>>()?;
    let obs = observe_path(&path, &scheme, args.seed.wrapping_add(0x5EED))?;

    let samples: Vec<ChannelSample> = obs
        .iter()
        .map(|o| ChannelSample::full(o.spec.t, o.value.iter().copied().collect()))
        .collect();
    let mut file = std::fs::File::create(&args.out)?;
    write_channel_csv(&mut file, &names, &samples)?;

    let meta = SimMetadata::new(
        args.seed,
        model_desc,
        serde_json::json!({
            "dt": args.dt,
            "n": args.n,
            "channels": names,
            "measurement_noise_sd": args.noise,
        }),
    );
    let meta_path = args.out.with_extension(format!(
        "{}meta.json",
        args.out
            .extension()
            .map(|e| format!("{}.", e.to_string_lossy()))
            .unwrap_or_default()
    ));
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)?;
    eprintln!(
        "wrote {} rows x {} channels to {} (metadata {})",
        args.n,
        names.len(),
        args.out.display(),
        meta_path.display()
    );
    Ok(())
}
