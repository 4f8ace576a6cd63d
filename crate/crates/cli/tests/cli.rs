//! End-to-end checks of the command-line surface: reproducibility, exit
//! codes, file formats and a small simulate -> fit round trip.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mode-sleuth"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("mode-sleuth-cli-tests");
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn simulate_ou(out: &Path, seed: u64, n: usize) {
    let status = bin()
        .args([
            "simulate", "--model", "ou", "--mu", "1", "--sigma", "1.4142", "--dt", "0.1", "--n",
        ])
        .arg(n.to_string())
        .args(["--seed"])
        .arg(seed.to_string())
        .arg("--out")
        .arg(out)
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn simulate_is_reproducible_byte_for_byte() {
    let a = tmp("repro_a.csv");
    let b = tmp("repro_b.csv");
    simulate_ou(&a, 7, 500);
    simulate_ou(&b, 7, 500);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let c = tmp("repro_c.csv");
    simulate_ou(&c, 8, 500);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
    // metadata sidecar exists and records the seed
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp("repro_a.csv.meta.json")).unwrap())
            .unwrap();
    assert_eq!(meta["seed"], 7);
}

#[test]
fn simulate_rejects_bad_config_with_exit_2() {
    let out = bin()
        .args(["simulate", "--dt", "0.1", "--n", "10", "--out"])
        .arg(tmp("nope.csv"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn spectrum_rejects_non_uniform_with_exit_2() {
    let path = tmp("nonuniform.csv");
    std::fs::write(&path, "t,x\n0,1\n0.1,2\n0.3,3\n0.35,1\n").unwrap();
    let out = bin()
        .args(["spectrum", "--data"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn spectrum_reports_flat_slope_for_white_noise() {
    use rand::Rng;
    let path = tmp("white.csv");
    let mut rng = <rand::rngs::StdRng as rand::SeedableRng>::seed_from_u64(5);
    let mut csv = String::from("t,x\n");
    for i in 0..4096 {
        csv.push_str(&format!("{},{}\n", i as f64 * 0.1, rng.random_range(-1.0..1.0f64)));
    }
    std::fs::write(&path, csv).unwrap();
    let out_csv = tmp("white_pg.csv");
    let out = bin()
        .args(["spectrum", "--welch", "8", "--band", "0.5,4", "--data"])
        .arg(&path)
        .arg("--out")
        .arg(&out_csv)
        .output()
        .unwrap();
    assert!(out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let slope: f64 = stderr
        .split("slope ")
        .nth(1)
        .and_then(|s| s.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(slope.abs() < 0.2, "white-noise slope {slope}");
    let pg = std::fs::read_to_string(&out_csv).unwrap();
    assert!(pg.starts_with("freq_hz,power\n"));
}

#[test]
fn simulate_fit_round_trip_recovers_rate() {
    let data = tmp("roundtrip.csv");
    simulate_ou(&data, 33, 2000);
    let report = tmp("roundtrip_fit.json");
    let out = bin()
        .args(["fit", "--real", "1", "--complex", "0", "--starts", "2", "--seed", "33", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&report)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "fit failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let fit: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let rate = fit["model"]["real_rates"][0].as_f64().unwrap();
    assert!(
        (rate - 1.0).abs() < 0.3,
        "recovered decay rate {rate}, truth 1.0"
    );
    assert_eq!(fit["model"]["format"], "mode-model/1");
}

#[test]
fn stream_emits_json_lines_and_skips_garbage() {
    let model_path = tmp("stream_model.json");
    std::fs::write(
        &model_path,
        serde_json::json!({
            "format": "mode-model/1",
            "n_channels": 1,
            "real_rates": [1.0],
            "complex_modes": [],
            "B": [1.0],
            "pins": [0],
            "Lambda": [1.4142],
            "channel_means": [0.0],
            "meas_noise": [0.01],
        })
        .to_string(),
    )
    .unwrap();
    let input = tmp("stream_input.txt");
    let mut text = String::new();
    for i in 0..200 {
        text.push_str(&format!("{},x={}\n", i as f64 * 0.1, (i as f64 * 0.37).sin()));
    }
    text.push_str("not a record\n");
    std::fs::write(&input, text).unwrap();

    let out = bin()
        .args(["stream", "--forget", "0.5", "--channels", "x", "--model-json"])
        .arg(&model_path)
        .arg("--input")
        .arg(&input)
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 200);
    let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    for key in ["t", "eps", "L", "L_disc", "x_filt", "lambda"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("1 skipped"), "stderr: {stderr}");
}

#[test]
fn grid_simulation_names_channels() {
    let grid_path = tmp("grid.json");
    std::fs::write(
        &grid_path,
        serde_json::json!({
            "format": "grid-model/1",
            "nodes": [{"m": 1.0, "gamma": 0.6}, {"m": 1.5, "gamma": 0.8}, {"m": 0.8, "gamma": 0.5}],
            "edges": [{"a": 0, "b": 1, "t": 1.2}, {"a": 1, "b": 2, "t": 0.9}],
            "relaxation": [[3.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 2.5]],
            "noise": [[0.4, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 0.3]],
            "tree_root": 0
        })
        .to_string(),
    )
    .unwrap();
    let out_csv = tmp("grid_sim.csv");
    let status = bin()
        .args(["simulate", "--pmus", "0,2", "--dt", "0.05", "--n", "100", "--seed", "1", "--grid"])
        .arg(&grid_path)
        .arg("--out")
        .arg(&out_csv)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&out_csv).unwrap();
    assert!(text.starts_with("t,f_0,f_2,dphi_0_2\n"));
    assert_eq!(text.lines().count(), 101);
}
