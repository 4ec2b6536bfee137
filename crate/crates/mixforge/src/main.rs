//! Command-line front end: one binary dispatching every pipeline, all
//! reproducible from (config file, seed) alone. Exit codes: 0 on success,
//! 1 on configuration or validation problems, 2 when a numerical guard
//! trips (including a non-mixing fitted rate).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mixforge::config::{load_config, FullConfig};
use mixforge::coupling::{
    calibrate_coupling, coupled_step, drift_constants, f_k_eval,
};
use mixforge::csvio;
use mixforge::error::{Error, Result};
use mixforge::field::ModeBasis;
use mixforge::haar::NoisePath;
use mixforge::inverse::{calibrate, default_m_lattice, default_r_lattice};
use mixforge::mixing::{default_burn_in, estimate_stationary, run_coupled_ensemble, StepRecord};
use mixforge::models::{
    flow_map, guard_level, run_flow, sample_smooth_state, state_space, Propagator,
};
use mixforge::rng::{stream, Domain};
use mixforge::tangent::{assemble_tangent_operator, tangent_flow, Forcing};

#[derive(Parser)]
#[command(name = "mixforge", version, about = "Coupled-trajectory mixing laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Configuration file; omitted means the documented defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for every random stream of the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output directory for CSV artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Print progress notes to stderr (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Draw one driving-noise path and write its coefficients.
    NoiseSample,
    /// Integrate one noisy trajectory and write per-step norms.
    Simulate,
    /// Compare the tangent flow against finite differences.
    TangentCheck,
    /// Sweep the right-inverse lattice on an assembled one-step operator.
    CalibrateInverse,
    /// Calibrate the coupling and execute a single coupled step.
    CoupleStep,
    /// Run the coupled ensemble and fit the decay rate.
    MixingRun,
    /// Estimate stationary moments from two independent starts.
    Stationary,
    /// Run the full invariant suite and write its summary.
    VerifyAll,
}

/// Everything a command needs, resolved from the CLI arguments.
struct RunConfig {
    command: Command,
    cfg: FullConfig,
    seed: u64,
    out: PathBuf,
    verbosity: u8,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage and version requests succeed; anything else is a usage
            // error.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cfg = match &cli.config {
        Some(path) => match load_config(path) {
            Ok(cfg) => cfg,
            Err(e) => {
                eprintln!("mixforge: {e}");
                return ExitCode::from(e.exit_code() as u8);
            }
        },
        None => FullConfig::default(),
    };
    let rc = RunConfig {
        command: cli.command,
        cfg,
        seed: cli.seed,
        out: cli.out,
        verbosity: cli.verbose,
    };
    init_threads(&rc.cfg);
    match run_command(&rc) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mixforge: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Worker-pool size: the config key, capped by MIXFORGE_THREADS.
fn init_threads(cfg: &FullConfig) {
    let env_cap = std::env::var("MIXFORGE_THREADS").ok().and_then(|s| s.parse::<usize>().ok());
    let n = match (cfg.run.threads, env_cap) {
        (0, None) => return, // runtime default
        (0, Some(cap)) => cap,
        (n, None) => n,
        (n, Some(cap)) => n.min(cap),
    };
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn note(rc: &RunConfig, msg: &str) {
    if rc.verbosity > 0 {
        eprintln!("mixforge: {msg}");
    }
}

fn run_command(rc: &RunConfig) -> Result<()> {
    match rc.command {
        Command::NoiseSample => cmd_noise_sample(rc),
        Command::Simulate => cmd_simulate(rc),
        Command::TangentCheck => cmd_tangent_check(rc),
        Command::CalibrateInverse => cmd_calibrate_inverse(rc),
        Command::CoupleStep => cmd_couple_step(rc),
        Command::MixingRun => cmd_mixing_run(rc),
        Command::Stationary => cmd_stationary(rc),
        Command::VerifyAll => cmd_verify_all(rc),
    }
}

fn out_path(rc: &RunConfig, name: &str) -> PathBuf {
    rc.out.join(name)
}

fn cmd_noise_sample(rc: &RunConfig) -> Result<()> {
    let spec = rc.cfg.noise_spec()?;
    let mut rng = stream(rc.seed, Domain::NoisePath, 0, 0);
    let path = NoisePath::sample(&spec, &mut rng);
    let table = csvio::path_table(&spec, &path);
    let file = out_path(rc, "noise_path.csv");
    table.write(&file)?;
    println!(
        "noise-sample: {} coefficients, sup-norm radius {:.6}, wrote {}",
        spec.dim(),
        spec.radius(),
        file.display()
    );
    Ok(())
}

fn cmd_simulate(rc: &RunConfig) -> Result<()> {
    let cfg = rc.cfg.flow_config()?;
    let spec = rc.cfg.noise_spec()?;
    cfg.validate_alignment(&spec)?;
    let (grid, basis) = state_space(&cfg)?;
    let prop = Propagator::new(&grid, cfg)?;
    let modes = ModeBasis::new(&basis, spec.spatial_modes)?;
    let mut rng = stream(rc.seed, Domain::InitialState, 0, 0);
    let radius = if rc.cfg.ensemble.radius > 0.0 { rc.cfg.ensemble.radius } else { 1.0 };
    let mut u = sample_smooth_state(&basis, radius, &mut rng);
    let steps = rc.cfg.ensemble.horizon;
    let mut rows = Vec::with_capacity(steps + 1);
    rows.push((0usize, u.sobolev_norm(cfg.index), u.sobolev_norm(0.0)));
    for k in 1..=steps {
        let mut path_rng = stream(rc.seed, Domain::NoisePath, 0, k as u64);
        let path = NoisePath::sample(&spec, &mut path_rng);
        u = flow_map(&prop, &u, &spec, &path, &modes)?;
        rows.push((k, u.sobolev_norm(cfg.index), u.sobolev_norm(0.0)));
        note(rc, &format!("step {k}: state norm {:.6}", rows[k].1));
    }
    csvio::trajectory_table(&rows).write(&out_path(rc, "trajectory.csv"))?;
    csvio::field_table(&u).write(&out_path(rc, "final_state.csv"))?;
    println!(
        "simulate: {} steps, final state norm {:.6}, wrote {} and {}",
        steps,
        rows[steps].1,
        out_path(rc, "trajectory.csv").display(),
        out_path(rc, "final_state.csv").display()
    );
    Ok(())
}

fn cmd_tangent_check(rc: &RunConfig) -> Result<()> {
    let cfg = rc.cfg.flow_config()?;
    let spec = rc.cfg.noise_spec()?;
    cfg.validate_alignment(&spec)?;
    let (grid, basis) = state_space(&cfg)?;
    let prop = Propagator::new(&grid, cfg)?;
    let modes = ModeBasis::new(&basis, spec.spatial_modes)?;
    let mut rng = stream(rc.seed, Domain::InitialState, 0, 0);
    let u0 = sample_smooth_state(&basis, 0.5, &mut rng);
    let dir = sample_smooth_state(&basis, 1.0, &mut rng);
    let mut path_rng = stream(rc.seed, Domain::NoisePath, 0, 0);
    let path = NoisePath::sample(&spec, &mut path_rng);
    let cells = path.cell_fields(&spec, &modes);
    let guard = guard_level(&prop, &u0, spec.radius());
    let traj = run_flow(&prop, &u0, &cells, guard, true)?;
    let tangent = tangent_flow(&traj, Some(&dir), Forcing::None, false)?.terminal;

    let mut table = csvio::Table::new(&["epsilon", "remainder_over_eps_sq", "tangent_norm"]);
    let tnorm = tangent.sobolev_norm(cfg.index);
    let mut ratios = Vec::new();
    for &eps in &[1e-2, 1e-3, 1e-4] {
        let mut up = u0.clone();
        up.axpy(eps, &dir);
        let fwd = run_flow(&prop, &up, &cells, guard, false)?.terminal;
        let mut lin = traj.terminal.clone();
        lin.axpy(eps, &tangent);
        let remainder = fwd.sub(&lin).sobolev_norm(cfg.index) / (eps * eps);
        ratios.push(remainder);
        table.push(vec![eps.to_string(), remainder.to_string(), tnorm.to_string()]);
    }
    let file = out_path(rc, "tangent_check.csv");
    table.write(&file)?;
    let spread = ratios.iter().cloned().fold(f64::MIN, f64::max)
        / ratios.iter().cloned().fold(f64::MAX, f64::min).max(f64::MIN_POSITIVE);
    println!(
        "tangent-check: remainder/eps^2 in [{:.4e}, {:.4e}] (spread {:.2}), wrote {}",
        ratios.iter().cloned().fold(f64::MAX, f64::min),
        ratios.iter().cloned().fold(f64::MIN, f64::max),
        spread,
        file.display()
    );
    Ok(())
}

fn cmd_calibrate_inverse(rc: &RunConfig) -> Result<()> {
    let cfg = rc.cfg.flow_config()?;
    let spec = rc.cfg.noise_spec()?;
    cfg.validate_alignment(&spec)?;
    let (grid, basis) = state_space(&cfg)?;
    let prop = Propagator::new(&grid, cfg)?;
    let modes = ModeBasis::new(&basis, spec.spatial_modes)?;
    let mut rng = stream(rc.seed, Domain::Calibration, 10, 0);
    let u0 = sample_smooth_state(&basis, 0.5, &mut rng);
    let path = NoisePath::sample(&spec, &mut rng);
    let cells = path.cell_fields(&spec, &modes);
    let guard = guard_level(&prop, &u0, spec.radius());
    let traj = run_flow(&prop, &u0, &cells, guard, true)?;
    note(rc, "assembling the one-step response operator");
    let op = assemble_tangent_operator(&traj, &spec, &modes, &basis)?;
    let mut test_set = Vec::with_capacity(rc.cfg.calibration.test_directions);
    for t in 0..rc.cfg.calibration.test_directions {
        let mut dir_rng = stream(rc.seed, Domain::Direction, t as u64, 0);
        let g = sample_smooth_state(&basis, 1.0, &mut dir_rng);
        test_set.push((basis.flatten(&g), 1.0));
    }
    let (rinv, rows) = calibrate(
        &op,
        &test_set,
        rc.cfg.calibration.defect_fraction,
        &default_r_lattice(),
        &default_m_lattice(op.matrix.ncols()),
    )?;
    let file = out_path(rc, "inverse_calibration.csv");
    csvio::inverse_table(&rows).write(&file)?;
    println!(
        "calibrate-inverse: selected r = {:.3e}, control dim = {}, wrote {}",
        rinv.r,
        rinv.m,
        file.display()
    );
    Ok(())
}

fn calibrated(rc: &RunConfig) -> Result<(
    mixforge::coupling::ControlEngine,
    mixforge::coupling::KantorovichDensity,
    mixforge::coupling::CouplingCalibration,
)> {
    let cfg = rc.cfg.flow_config()?;
    let spec = rc.cfg.noise_spec()?;
    cfg.validate_alignment(&spec)?;
    note(rc, "calibrating the coupling (drift, right inverse, control radius)");
    calibrate_coupling(&cfg, &spec, rc.seed, &rc.cfg.calibration_options())
}

fn cmd_couple_step(rc: &RunConfig) -> Result<()> {
    let (engine, kd, summary) = calibrated(rc)?;
    let basis = engine.basis().clone();
    let mut rng = stream(rc.seed, Domain::InitialState, 0, 0);
    let u = sample_smooth_state(&basis, 0.5 * summary.r0_star, &mut rng);
    let dir = sample_smooth_state(&basis, 1.0, &mut rng);
    let mut u_prime = u.clone();
    u_prime.axpy(kd.d0 / 2.0, &dir);
    let mut step_rng = stream(rc.seed, Domain::Coupling, 0, 1);
    let out = coupled_step(&engine, &u, &u_prime, &kd, &mut step_rng)?;
    let record = StepRecord {
        pair: 0,
        step: 1,
        branch: out.branch,
        distance_before: out.distance_before,
        distance_after: out.distance_after,
        squeeze_ratio: out.squeeze_ratio,
        glued_equal: out.glued_equal,
        tv_estimate: out.tv_estimate,
        clamped: out.clamped,
    };
    let file = out_path(rc, "couple_step.csv");
    csvio::step_log_table(&[record]).write(&file)?;
    println!(
        "couple-step: branch {:?}, distance {:.6e} -> {:.6e}, glued = {}, f_K before = {:.6e}, wrote {}",
        out.branch,
        out.distance_before,
        out.distance_after,
        out.glued_equal,
        f_k_eval(&kd, &u, &u_prime),
        file.display()
    );
    Ok(())
}

fn cmd_mixing_run(rc: &RunConfig) -> Result<()> {
    let (engine, kd, summary) = calibrated(rc)?;
    note(rc, "running the coupled ensemble");
    let run = run_coupled_ensemble(&engine, &kd, &rc.cfg.ensemble_options(rc.seed))?;
    csvio::mixing_steps_table(&run.report.steps).write(&out_path(rc, "mixing_steps.csv"))?;
    csvio::mixing_summary_table(&run.report, &kd, &summary)
        .write(&out_path(rc, "mixing_summary.csv"))?;
    csvio::step_log_table(&run.records).write(&out_path(rc, "step_log.csv"))?;
    csvio::glue_table(&run.report.glue_times).write(&out_path(rc, "glue_times.csv"))?;
    println!(
        "mixing-run: kappa = {:.6} (95% band {:.6}..{:.6}), burn-in {}, wrote 4 tables under {}",
        run.report.fit.kappa,
        run.report.band.0,
        run.report.band.1,
        run.report.burn_in,
        rc.out.display()
    );
    if !run.report.fit.is_mixing() {
        return Err(Error::Calibration(format!(
            "fitted decay rate {:.6} is not below one; the ensemble shows no mixing",
            run.report.fit.kappa
        )));
    }
    Ok(())
}

fn cmd_stationary(rc: &RunConfig) -> Result<()> {
    let cfg = rc.cfg.flow_config()?;
    let spec = rc.cfg.noise_spec()?;
    cfg.validate_alignment(&spec)?;
    let (grid, basis) = state_space(&cfg)?;
    let prop = Propagator::new(&grid, cfg)?;
    let modes = ModeBasis::new(&basis, spec.spatial_modes)?;
    let drift = drift_constants(&cfg, &spec, rc.seed, &rc.cfg.calibration_options())?;
    // Derived burn-in when the file does not pin one: long enough to forget
    // both the mixing time and the high start's initial excess.
    let burn = default_burn_in(drift.gamma, drift.r_star, drift.r0_star);
    let opts = rc.cfg.stationary_options(rc.seed, burn, drift.r_star);
    note(rc, &format!("burn-in {} steps, {} chains per start", opts.burn_in, opts.chains));
    let rep = estimate_stationary(&prop, Some((&spec, &modes)), &basis, &opts)?;
    let file = out_path(rc, "stationary.csv");
    csvio::stationary_table(&rep).write(&file)?;
    println!(
        "stationary: burn-in {}, support max {:.6}, starts agree = {}, wrote {}",
        rep.burn_in,
        rep.support_max,
        rep.agree,
        file.display()
    );
    Ok(())
}

fn cmd_verify_all(rc: &RunConfig) -> Result<()> {
    let rows = mixforge::acceptance::run_suite(&rc.cfg, rc.seed, rc.verbosity > 0)?;
    let file = out_path(rc, "verify_summary.csv");
    csvio::verify_table(&rows).write(&file)?;
    let failed: Vec<&str> =
        rows.iter().filter(|(_, ok, _)| !ok).map(|(name, _, _)| name.as_str()).collect();
    for (name, ok, detail) in &rows {
        println!("{}: {} ({})", name, if *ok { "pass" } else { "FAIL" }, detail);
    }
    println!("verify-all: {}/{} checks passed, wrote {}", rows.len() - failed.len(), rows.len(), file.display());
    if !failed.is_empty() {
        return Err(Error::Calibration(format!(
            "invariant checks failed: {}",
            failed.join(", ")
        )));
    }
    Ok(())
}
