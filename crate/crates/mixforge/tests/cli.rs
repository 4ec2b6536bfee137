//! End-to-end checks of the command-line binary: exit codes, byte-level
//! reproducibility of outputs, and the schema of every emitted table.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mixforge::csvio::read_csv;

const SMALL_CFG: &str = "\
[model]
kind = nse
viscosity = 0.5
grid_size = 16
substeps = 8

[noise]
spatial_modes = 4
level_max = 0
amplitude_base = 0.4

[calibration]
gain_pairs = 24
squeeze_samples = 24
glue_trials = 24
shell_trials = 40
shells = 4
diss_samples = 16
test_directions = 8

[ensemble]
pairs = 2
horizon = 8
functionals = 8
resamples = 20

[stationary]
chains = 4
samples = 8
shells = 3
";

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir()
        .join(format!("mixforge-cli-{}-{tag}", std::process::id()));
    if dir.exists() {
        fs::remove_dir_all(&dir).unwrap();
    }
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_cfg(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    fs::write(&path, body).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixforge"))
        .args(args)
        .output()
        .expect("failed to launch the binary")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no exit code")
}

#[test]
fn help_exits_zero() {
    let out = run(&["--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("mixing"), "help text: {text}");
}

#[test]
fn unknown_subcommand_exits_one() {
    let out = run(&["frobnicate"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn config_error_exits_one_and_names_the_line() {
    let dir = scratch("badcfg");
    let cfg = write_cfg(&dir, "[model]\nkind = nse\nviscosity = -1\n");
    let out = run(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("viscosity") && err.contains("line 3"), "stderr: {err}");
}

#[test]
fn unknown_config_key_exits_one() {
    let dir = scratch("unkkey");
    let cfg = write_cfg(&dir, "[model]\nkind = nse\nwarp_factor = 9\n");
    let out = run(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("warp_factor"), "stderr: {err}");
}

#[test]
fn simulate_reruns_are_byte_identical() {
    let dir = scratch("simulate");
    let cfg = write_cfg(&dir, SMALL_CFG);
    let (out_a, out_b) = (dir.join("a"), dir.join("b"));
    for out_dir in [&out_a, &out_b] {
        let out = run(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "11",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["trajectory.csv", "final_state.csv"] {
        let a = fs::read(out_a.join(name)).unwrap();
        let b = fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
        let table = read_csv(&out_a.join(name)).unwrap();
        assert!(!table.rows.is_empty(), "{name} has no data rows");
    }
    let traj = read_csv(&out_a.join("trajectory.csv")).unwrap();
    assert_eq!(traj.header, vec!["step", "state_norm", "l2_norm"]);
    assert_eq!(traj.rows.len(), 9, "horizon 8 plus the initial row");
}

#[test]
fn noise_sample_emits_canonical_coefficients() {
    let dir = scratch("noise");
    let cfg = write_cfg(&dir, SMALL_CFG);
    let out = run(&[
        "noise-sample",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let table = read_csv(&dir.join("o/noise_path.csv")).unwrap();
    assert_eq!(table.header, vec!["mode", "level", "shift", "xi"]);
    // 4 modes x (scaling + one wavelet level) = 8 coefficients.
    assert_eq!(table.rows.len(), 8);
    let levels: Vec<i32> = table.rows.iter().map(|r| r[1].parse().unwrap()).collect();
    let mut sorted = levels.clone();
    sorted.sort();
    assert_eq!(levels, sorted, "levels must come in canonical ascending order");
    for row in &table.rows {
        let xi: f64 = row[3].parse().unwrap();
        assert!(xi.abs() <= 1.0, "coefficient {xi} escapes the brick");
    }
}

#[test]
fn tangent_check_reports_stable_quadratic_remainders() {
    let dir = scratch("tangent");
    let cfg = write_cfg(&dir, SMALL_CFG);
    let out = run(&[
        "tangent-check",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let table = read_csv(&dir.join("o/tangent_check.csv")).unwrap();
    assert_eq!(table.header[0], "epsilon");
    assert_eq!(table.rows.len(), 3);
    for row in &table.rows {
        let ratio: f64 = row[1].parse().unwrap();
        assert!(ratio.is_finite() && ratio > 0.0);
    }
}

#[test]
fn calibrate_inverse_emits_the_sweep() {
    let dir = scratch("inverse");
    let cfg = write_cfg(&dir, SMALL_CFG);
    let out = run(&[
        "calibrate-inverse",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let table = read_csv(&dir.join("o/inverse_calibration.csv")).unwrap();
    assert_eq!(table.header, vec!["r", "m", "max_defect_ratio", "operator_norm_estimate"]);
    assert!(table.rows.len() >= 9, "expected at least one full ridge lattice");
}

#[test]
fn couple_step_reports_contraction() {
    let dir = scratch("couple");
    let cfg = write_cfg(&dir, SMALL_CFG);
    let out = run(&[
        "couple-step",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let table = read_csv(&dir.join("o/couple_step.csv")).unwrap();
    assert_eq!(table.header, vec!["key", "value"]);
    assert!(table.rows.iter().any(|r| r[0] == "branch"));
}

#[test]
fn mixing_run_with_glued_starts_exits_two() {
    // Pairs that start equal stay glued: the distance series is
    // identically zero, the fitted rate is flat, and the binary must
    // report the non-decaying fit through exit code 2.
    let dir = scratch("flatmix");
    let cfg_body = format!("{SMALL_CFG}distance_schedule = 0.0\n");
    let cfg = write_cfg(&dir, &cfg_body);
    let out = run(&[
        "mixing-run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    for name in ["mixing_steps.csv", "mixing_summary.csv", "step_log.csv", "glue_times.csv"] {
        let table = read_csv(&dir.join("o").join(name)).unwrap();
        assert!(!table.header.is_empty(), "{name} must still be written");
    }
}

#[test]
fn stationary_emits_two_start_moments() {
    let dir = scratch("stationary");
    let cfg = write_cfg(&dir, SMALL_CFG);
    let out = run(&[
        "stationary",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let table = read_csv(&dir.join("o/stationary.csv")).unwrap();
    assert_eq!(
        table.header,
        vec!["start", "observable", "mean", "band_lo", "band_hi", "var"]
    );
    let starts: Vec<&str> = table.rows.iter().map(|r| r[0].as_str()).collect();
    assert!(starts.contains(&"low") && starts.contains(&"high"));
}
