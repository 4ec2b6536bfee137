//! End-to-end verification checks.
//!
//! Each check exercises one pipeline of the crate at working scale and
//! compares measured numbers against tolerances pinned here in code:
//! the Haar noise basis, both flow solvers, tangent/adjoint consistency,
//! right-inverse calibration, the squeezing and gluing guarantees of the
//! coupled step, the step-shaped coupling distance, ensemble decay of the
//! coupling distance, stationary-moment agreement, and bitwise determinism
//! of every pipeline under a fixed seed.
//!
//! Checks share one calibration cache, so the expensive coupling
//! calibration runs once per (configuration, seed) per process no matter
//! how many checks need it.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, RngCore};

use crate::config::FullConfig;
use crate::coupling::{
    calibrate_coupling, drift_constants, f_k_eval, maximal_coupling_sample, near_step,
    psi_squeeze, BlockLaw, ControlEngine, CouplingCalibration, KantorovichDensity, ProductTent,
};
use crate::csvio;
use crate::error::Result;
use crate::field::{FieldKind, ModeBasis, SpectralField, StateBasis};
use crate::grid::Grid;
use crate::haar::{haar_eval, shifts_at, CoeffIndex, NoisePath, TentDensity};
use crate::inverse::{
    calibrate, default_m_lattice, default_r_lattice, monotonicity_violations, sweep, RightInverse,
};
use crate::mixing::{
    default_burn_in, estimate_stationary, run_coupled_ensemble, EnsembleOptions,
    StationaryOptions,
};
use crate::models::{
    flow_map, flow_zero, guard_level, run_flow, sample_smooth_state, state_space, ModelKind,
    Propagator,
};
use crate::rng::{stream, Domain};
use crate::stats::{ks_statistic, ks_threshold};
use crate::tangent::{
    adjoint_apply_via_flow, adjoint_flow, assemble_tangent_operator, fd_check, tangent_flow,
    Forcing, TangentOperator,
};

/// Outcome of one verification check.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, body: Result<(bool, String)>) -> Check {
    match body {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check { name, passed: false, detail: format!("error: {e}") },
    }
}

// ---------------------------------------------------------------------------
// Shared calibration cache
// ---------------------------------------------------------------------------

type CalBundle = Arc<(ControlEngine, KantorovichDensity, CouplingCalibration)>;

static CAL_CACHE: OnceLock<Mutex<HashMap<String, CalBundle>>> = OnceLock::new();

/// Coupling calibration for a configuration, computed once per process.
/// The lock is held for the duration of a cache miss on purpose: a second
/// caller needing the same bundle should wait, not recalibrate.
pub fn calibrated(cfg: &FullConfig, seed: u64) -> Result<CalBundle> {
    let key = format!("{seed}\n{}", cfg.render());
    let cache = CAL_CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = cache.lock().expect("calibration cache poisoned");
    if let Some(hit) = map.get(&key) {
        return Ok(hit.clone());
    }
    let flow = cfg.flow_config()?;
    let spec = cfg.noise_spec()?;
    flow.validate_alignment(&spec)?;
    let bundle = Arc::new(calibrate_coupling(&flow, &spec, seed, &cfg.calibration_options())?);
    map.insert(key, bundle.clone());
    Ok(bundle)
}

/// The same experiment on the other model kind: swaps the kind and
/// re-applies the two defaults that depend on it, keeping everything else.
fn model_variant(cfg: &FullConfig, kind: &str) -> FullConfig {
    let mut c = cfg.clone();
    if c.model.kind == kind {
        return c;
    }
    c.model.kind = kind.to_string();
    if kind == "cgl" {
        c.model.sobolev_index = 2.0;
        c.noise.spatial_modes = 10;
    } else {
        c.model.sobolev_index = 1.0;
        c.noise.spatial_modes = 8;
    }
    c
}

// ---------------------------------------------------------------------------
// 1. Noise basis
// ---------------------------------------------------------------------------

/// Haar system orthonormal to 1e-12 on the exact dyadic partition; the
/// time-quadrature energy of sampled paths matches the coefficient sum to
/// 1e-10; every sampled path stays inside the coefficient brick; the
/// coefficient law passes a one-sample KS test at the 1% level.
pub fn check_noise_basis(cfg: &FullConfig, seed: u64) -> Check {
    outcome("noise-basis", noise_basis_body(cfg, seed))
}

fn noise_basis_body(cfg: &FullConfig, seed: u64) -> Result<(bool, String)> {
    let spec = cfg.noise_spec()?;

    // Orthonormality: products of Haar functions are constant on the cells
    // of the finest dyadic partition, so midpoint quadrature is exact.
    let jmax = spec.level_max.max(3);
    let cells = 1usize << ((jmax + 1) as u32);
    let mut funcs: Vec<(i32, usize)> = vec![(-1, 0)];
    for j in 0..=jmax {
        for s in 0..shifts_at(j) {
            funcs.push((j, s));
        }
    }
    let mut ortho_err = 0.0f64;
    for (i, &(la, sa)) in funcs.iter().enumerate() {
        for &(lb, sb) in &funcs[i..] {
            let mut acc = 0.0;
            for c in 0..cells {
                let t = (c as f64 + 0.5) / cells as f64;
                acc += haar_eval(la, sa, t)? * haar_eval(lb, sb, t)?;
            }
            acc /= cells as f64;
            let want = if (la, sa) == (lb, sb) { 1.0 } else { 0.0 };
            ortho_err = ortho_err.max((acc - want).abs());
        }
    }

    // Energy identity: integrate |eta_t|^2 by the same exact quadrature and
    // compare with the closed-form coefficient sum.
    let idxs = spec.coeff_indices();
    let pcells = 1usize << ((spec.level_max + 1).max(0) as u32);
    let mut energy_err = 0.0f64;
    let mut rng = stream(seed, Domain::NoisePath, 77, 0);
    for _ in 0..10 {
        let path = NoisePath::sample(&spec, &mut rng);
        let mut quad = 0.0;
        for mode in 0..spec.spatial_modes {
            for c in 0..pcells {
                let t = (c as f64 + 0.5) / pcells as f64;
                let mut g = 0.0;
                for (ci, &xi) in idxs.iter().zip(&path.xi) {
                    if ci.mode == mode {
                        g += spec.amplitude(ci.mode, ci.level)
                            * xi
                            * haar_eval(ci.level, ci.shift, t)?;
                    }
                }
                quad += g * g;
            }
        }
        quad /= pcells as f64;
        energy_err = energy_err.max((quad - path.integral_norm_sq(&spec)).abs());
    }

    // Brick containment: sampled coefficients never leave [-1, 1].
    let mut brick_ok = true;
    let mut rng = stream(seed, Domain::NoisePath, 78, 0);
    for _ in 0..200 {
        if !NoisePath::sample(&spec, &mut rng).in_brick() {
            brick_ok = false;
        }
    }

    // Coefficient law.
    let n = 100_000;
    let mut rng = stream(seed, Domain::Calibration, 51, 0);
    let draws: Vec<f64> = (0..n).map(|_| spec.density.sample(&mut rng)).collect();
    let ks = ks_statistic(&draws, |x| spec.density.cdf(x));
    let ks_thr = ks_threshold(n, 0.01);

    let passed = ortho_err <= 1e-12 && energy_err <= 1e-10 && brick_ok && ks < ks_thr;
    Ok((
        passed,
        format!(
            "orthonormality {ortho_err:.2e} <= 1e-12; energy identity {energy_err:.2e} <= 1e-10; \
             brick containment {brick_ok}; KS {ks:.4} < {ks_thr:.4}"
        ),
    ))
}

// ---------------------------------------------------------------------------
// 2. Flow solvers
// ---------------------------------------------------------------------------

/// A pure shear mode decays by exactly exp(-nu) per unit time (1e-8
/// relative); the scalar model's constant mode loses modulus by exactly
/// exp(-gamma) (1e-8); noisy velocity steps stay divergence-free below
/// 1e-12; halving the substep shrinks the terminal error by at least 1.8x
/// across three refinements for both models.
pub fn check_flow_solvers(cfg: &FullConfig, seed: u64) -> Check {
    outcome("flow-solvers", flow_solvers_body(cfg, seed))
}

fn flow_solvers_body(cfg: &FullConfig, seed: u64) -> Result<(bool, String)> {
    let ncfg = model_variant(cfg, "nse");
    let nflow = ncfg.flow_config()?;
    let nu = match nflow.model {
        ModelKind::Nse { nu } => nu,
        _ => unreachable!("variant forces the velocity model"),
    };

    // Shear decay: the nonlinear term vanishes on a pure shear field, so
    // one unit of time is an exact viscous factor on the |k| = 1 mode.
    let grid = Grid::new(nflow.grid_n)?;
    let prop = Propagator::new(&grid, nflow)?;
    let mut u0 = SpectralField::zeros(&grid, FieldKind::Velocity2d);
    let (i1, j0) = (grid.idx_of(1), grid.idx_of(0));
    u0.comps[1][[i1, j0]] = Complex64::new(0.0, -0.65);
    u0.comps[1][[grid.idx_of(-1), j0]] = Complex64::new(0.0, 0.65);
    let u1 = flow_zero(&prop, &u0)?;
    let want = (-nu).exp() * u0.sobolev_norm(nflow.index);
    let shear_err = (u1.sobolev_norm(nflow.index) - want).abs() / want;

    // Constant-mode modulus of the scalar model: the nonlinearity only
    // rotates the phase, so the damping factor is exact.
    let ccfg = model_variant(cfg, "cgl");
    let cflow = ccfg.flow_config()?;
    let gm = match cflow.model {
        ModelKind::Cgl { gamma, .. } => gamma,
        _ => unreachable!("variant forces the scalar model"),
    };
    let cgrid = Grid::new(cflow.grid_n)?;
    let cprop = Propagator::new(&cgrid, cflow)?;
    let mut c0 = SpectralField::zeros(&cgrid, FieldKind::ComplexScalar);
    let c = Complex64::new(0.8, -0.3);
    c0.comps[0][[0, 0]] = c;
    let c1 = flow_zero(&cprop, &c0)?;
    let cgl_err = (c1.comps[0][[0, 0]].norm() - (-gm).exp() * c.norm()).abs() / c.norm();

    // Divergence stays at rounding level along a noisy trajectory.
    let nspec = ncfg.noise_spec()?;
    nflow.validate_alignment(&nspec)?;
    let basis = Arc::new(StateBasis::new(&grid, FieldKind::Velocity2d, nflow.index));
    let modes = ModeBasis::new(&basis, nspec.spatial_modes)?;
    let mut u = sample_smooth_state(&basis, 0.8, &mut stream(seed, Domain::InitialState, 31, 0));
    let mut div_sup = 0.0f64;
    for k in 0..3 {
        let path = NoisePath::sample(&nspec, &mut stream(seed, Domain::NoisePath, 31, k));
        u = flow_map(&prop, &u, &nspec, &path, &modes)?;
        div_sup = div_sup.max(u.divergence_sup());
    }

    // Step-halving order: errors against a much finer reference.
    let mut min_ratio = f64::MAX;
    for (variant, tag) in [(&ncfg, 0u64), (&ccfg, 1u64)] {
        let flow = variant.flow_config()?;
        let spec = variant.noise_spec()?;
        let vgrid = Grid::new(flow.grid_n)?;
        let vbasis = Arc::new(StateBasis::new(&vgrid, flow.model.field_kind(), flow.index));
        let vmodes = ModeBasis::new(&vbasis, spec.spatial_modes)?;
        let u0 = sample_smooth_state(&vbasis, 0.8, &mut stream(seed, Domain::InitialState, 70 + tag, 0));
        let path = NoisePath::sample(&spec, &mut stream(seed, Domain::NoisePath, 70 + tag, 0));
        let terminal = |mult: usize| -> Result<SpectralField> {
            let mut f = flow;
            f.substeps = flow.substeps * mult;
            let p = Propagator::new(&vgrid, f)?;
            flow_map(&p, &u0, &spec, &path, &vmodes)
        };
        let reference = terminal(64)?;
        let errs: Vec<f64> = [1usize, 2, 4, 8]
            .iter()
            .map(|&m| Ok(terminal(m)?.sub(&reference).sobolev_norm(flow.index)))
            .collect::<Result<_>>()?;
        for w in errs.windows(2) {
            min_ratio = min_ratio.min(w[0] / w[1]);
        }
    }

    let passed = shear_err <= 1e-8 && cgl_err <= 1e-8 && div_sup < 1e-12 && min_ratio >= 1.8;
    Ok((
        passed,
        format!(
            "shear decay {shear_err:.2e} <= 1e-8; constant-mode decay {cgl_err:.2e} <= 1e-8; \
             divergence {div_sup:.2e} < 1e-12; refinement ratio {min_ratio:.2} >= 1.8"
        ),
    ))
}

// ---------------------------------------------------------------------------
// 3. Derivatives
// ---------------------------------------------------------------------------

/// The finite-difference remainder divided by epsilon^2 varies by at most
/// 25% across epsilon in {1e-2, 1e-3, 1e-4}; the tangent/adjoint duality
/// pairing is constant along the trajectory to 1e-8 relative; the
/// assembled response matrix agrees with the per-application flow route to
/// 1e-9 relative.
pub fn check_derivatives(cfg: &FullConfig, seed: u64) -> Check {
    outcome("derivatives", derivatives_body(cfg, seed))
}

fn derivatives_body(cfg: &FullConfig, seed: u64) -> Result<(bool, String)> {
    let flow = cfg.flow_config()?;
    let spec = cfg.noise_spec()?;
    flow.validate_alignment(&spec)?;
    let (grid, basis) = state_space(&flow)?;
    let prop = Propagator::new(&grid, flow)?;
    let modes = ModeBasis::new(&basis, spec.spatial_modes)?;
    let path = NoisePath::sample(&spec, &mut stream(seed, Domain::NoisePath, 41, 0));
    let cells = path.cell_fields(&spec, &modes);
    let u0 = sample_smooth_state(&basis, 0.6, &mut stream(seed, Domain::InitialState, 41, 0));
    let guard = guard_level(&prop, &u0, spec.radius());
    let traj = run_flow(&prop, &u0, &cells, guard, true)?;

    let dir = sample_smooth_state(&basis, 1.0, &mut stream(seed, Domain::Direction, 41, 0));
    let fd = fd_check(&traj, &cells, guard, &dir, &[1e-2, 1e-3, 1e-4])?;

    // Duality pairing <v_n, w_n> in the flat inner product is conserved.
    let v0 = sample_smooth_state(&basis, 0.4, &mut stream(seed, Domain::Direction, 42, 0));
    let w1 = sample_smooth_state(&basis, 0.7, &mut stream(seed, Domain::Direction, 43, 0));
    let tang = tangent_flow(&traj, Some(&v0), Forcing::None, true)?;
    let vstates = tang.states.expect("recorded tangent states");
    let wstates = adjoint_flow(&traj, &w1)?;
    let scale = vstates[0].sobolev_norm(0.0) * wstates[0].sobolev_norm(0.0);
    let p0 = vstates[0].sobolev_inner(&wstates[0], 0.0);
    let mut pairing_err = 0.0f64;
    for (vn, wn) in vstates.iter().zip(&wstates) {
        pairing_err = pairing_err.max((vn.sobolev_inner(wn, 0.0) - p0).abs() / scale);
    }

    // Matrix route versus flow route for the adjoint of the response.
    let op = assemble_tangent_operator(&traj, &spec, &modes, &basis)?;
    let w = sample_smooth_state(&basis, 0.9, &mut stream(seed, Domain::Direction, 44, 0));
    let via_matrix = op.adjoint_apply(&basis.flatten(&w));
    let via_flow = adjoint_apply_via_flow(&traj, &spec, &modes, &w)?;
    let op_err = (&via_matrix - &via_flow).norm() / via_matrix.norm().max(f64::MIN_POSITIVE);

    let passed = fd.spread <= 0.25 && pairing_err <= 1e-8 && op_err <= 1e-9;
    Ok((
        passed,
        format!(
            "fd remainder spread {:.3} <= 0.25 (ratios {:?}); pairing drift {pairing_err:.2e} \
             <= 1e-8; matrix-vs-flow {op_err:.2e} <= 1e-9",
            fd.spread,
            fd.ratios.iter().map(|r| (r * 100.0).round() / 100.0).collect::<Vec<_>>()
        ),
    ))
}

// ---------------------------------------------------------------------------
// 4. Right inverse
// ---------------------------------------------------------------------------

/// Ridge defects on synthetic identity and diagonal operators match their
/// closed forms to 1e-12; on an assembled velocity response operator the
/// worst-case defect is monotone as the ridge shrinks and the column count
/// grows; the calibrated lattice point achieves the defect target on a
/// 20-field test set.
pub fn check_right_inverse(cfg: &FullConfig, seed: u64) -> Check {
    outcome("right-inverse", right_inverse_body(cfg, seed))
}

fn right_inverse_body(cfg: &FullConfig, seed: u64) -> Result<(bool, String)> {
    // Synthetic operators with unit coefficient weights: the ridge solve
    // has an explicit solution, defect = |r f_i / (d_i^2 + r)| per column,
    // plus the untouched orthogonal complement when columns are truncated.
    let sgrid = Grid::new(8)?;
    let sbasis = Arc::new(StateBasis::new(&sgrid, FieldKind::Velocity2d, 1.0));
    let dim = 8;
    let columns: Vec<CoeffIndex> =
        (0..dim).map(|m| CoeffIndex { mode: m, level: -1, shift: 0 }).collect();
    let mut rng = stream(seed, Domain::Direction, 3000, 0);
    let mut f = DVector::from_fn(dim, |_, _| rng.gen::<f64>() - 0.5);
    f /= f.norm();

    let mut closed_err = 0.0f64;
    let ident = TangentOperator {
        basis: sbasis.clone(),
        matrix: DMatrix::identity(dim, dim),
        gram_e: DVector::from_element(dim, 1.0),
        columns: columns.clone(),
    };
    let ds: Vec<f64> = (0..dim).map(|i| (i as f64 + 1.0) / 2.0).collect();
    let diag = TangentOperator {
        basis: sbasis,
        matrix: DMatrix::from_diagonal(&DVector::from_vec(ds.clone())),
        gram_e: DVector::from_element(dim, 1.0),
        columns,
    };
    for r in [1e-3, 0.1, 1.0] {
        let out = RightInverse::new(&ident, r, dim)?.apply(&f);
        closed_err = closed_err.max((out.defect - r / (1.0 + r)).abs());
        for m in [5usize, dim] {
            let out = RightInverse::new(&diag, r, m)?.apply(&f);
            let mut want = 0.0;
            for i in 0..dim {
                let res = if i < m { r * f[i] / (ds[i] * ds[i] + r) } else { f[i] };
                want += res * res;
            }
            closed_err = closed_err.max((out.defect - want.sqrt()).abs());
        }
    }

    // Assembled operator at the working configuration.
    let flow = cfg.flow_config()?;
    let spec = cfg.noise_spec()?;
    flow.validate_alignment(&spec)?;
    let (_, basis) = state_space(&flow)?;
    let grid = Grid::new(flow.grid_n)?;
    let prop = Propagator::new(&grid, flow)?;
    let modes = ModeBasis::new(&basis, spec.spatial_modes)?;
    let mut rng = stream(seed, Domain::Calibration, 3001, 0);
    let u0 = sample_smooth_state(&basis, 0.5, &mut rng);
    let path = NoisePath::sample(&spec, &mut rng);
    let cells = path.cell_fields(&spec, &modes);
    let guard = guard_level(&prop, &u0, spec.radius());
    let traj = run_flow(&prop, &u0, &cells, guard, true)?;
    let op = assemble_tangent_operator(&traj, &spec, &modes, &basis)?;

    let mut test_set = Vec::with_capacity(20);
    for t in 0..20 {
        let v =
            sample_smooth_state(&basis, 1.0, &mut stream(seed, Domain::Direction, 3002, t as u64));
        let image = tangent_flow(&traj, Some(&v), Forcing::None, false)?.terminal;
        test_set.push((basis.flatten(&image), 1.0));
    }
    let r_lattice = default_r_lattice();
    let m_lattice = default_m_lattice(spec.dim());
    let rows = sweep(&op, &test_set, &r_lattice, &m_lattice)?;
    let violations = monotonicity_violations(&rows, 1e-9);

    let eps = cfg.calibration_options().defect_fraction;
    let (rinv, _) = calibrate(&op, &test_set, eps, &r_lattice, &m_lattice)?;
    let achieved = test_set
        .iter()
        .map(|(f, n)| rinv.apply(f).defect / n)
        .fold(0.0f64, f64::max);

    let passed = closed_err <= 1e-12 && violations == 0 && achieved <= eps;
    Ok((
        passed,
        format!(
            "closed-form defect error {closed_err:.2e} <= 1e-12; lattice monotonicity \
             violations {violations}; calibrated defect {achieved:.4} <= {eps} \
             (r = {:.1e}, m = {})",
            rinv.r, rinv.m
        ),
    ))
}

// ---------------------------------------------------------------------------
// 5. Squeezing
// ---------------------------------------------------------------------------

/// With the calibrated control, shifting the second copy's noise contracts
/// the pair by at least half on >= 99% of 500 sampled (state, neighbour,
/// path) triples within the control radius — for both models.
pub fn check_squeezing(cfg: &FullConfig, seed: u64) -> Check {
    outcome("squeezing", squeezing_body(cfg, seed))
}

fn squeezing_body(cfg: &FullConfig, seed: u64) -> Result<(bool, String)> {
    let mut fracs = Vec::new();
    for (kind, tag) in [("nse", 0u64), ("cgl", 1u64)] {
        let variant = model_variant(cfg, kind);
        let bundle = calibrated(&variant, seed)?;
        let (engine, _, cal) = &*bundle;
        let samples = 500usize;
        let mut ok = 0usize;
        for t in 0..samples {
            let mut rng = stream(seed, Domain::Calibration, 9100 + tag, t as u64);
            let u = sample_smooth_state(engine.basis(), cal.r0_star * rng.gen::<f64>(), &mut rng);
            let dir = sample_smooth_state(engine.basis(), 1.0, &mut rng);
            let d = cal.delta * (0.001 + 0.999 * rng.gen::<f64>());
            let mut up = u.clone();
            up.axpy(d, &dir);
            let path = NoisePath::sample(&engine.spec, &mut rng);
            let ctx = engine.context(&u, &path)?;
            if psi_squeeze(&ctx, &up)?.ratio <= 0.5 {
                ok += 1;
            }
        }
        fracs.push((kind, ok as f64 / samples as f64));
    }
    let passed = fracs.iter().all(|(_, f)| *f >= 0.99);
    let detail = fracs
        .iter()
        .map(|(k, f)| format!("{k}: ratio <= 0.5 on {:.1}% of 500 (need >= 99%)", 100.0 * f))
        .collect::<Vec<_>>()
        .join("; ");
    Ok((passed, detail))
}

// ---------------------------------------------------------------------------
// 6. Coupling and total variation
// ---------------------------------------------------------------------------

/// A local one-dimensional law with a shifted tent density, for checking
/// the coupling kernel against quadrature.
struct ShiftedTent {
    tent: TentDensity,
    delta: f64,
}

impl BlockLaw for ShiftedTent {
    fn block_dim(&self) -> usize {
        1
    }
    fn sample(&self, mut rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        Ok(DVector::from_element(1, self.tent.sample(&mut rng) + self.delta))
    }
    fn density(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.tent.pdf(x[0] - self.delta))
    }
}

/// The maximal-coupling sampler's inequality frequency matches the
/// quadrature total variation of two shifted tents within 0.01; the
/// controlled step's gluing failure rate stays below the fitted linear
/// bound at all three probe distances; both noise marginals of the coupled
/// step pass a KS test at the 1% level.
pub fn check_coupling_tv(cfg: &FullConfig, seed: u64) -> Check {
    outcome("coupling-tv", coupling_tv_body(cfg, seed))
}

fn coupling_tv_body(cfg: &FullConfig, seed: u64) -> Result<(bool, String)> {
    // Total variation of a tent against its shift: the densities are
    // piecewise linear, so a fine trapezoid rule is exact to well below
    // the comparison tolerance.
    let tent = TentDensity::new(cfg.noise.density_slope)?;
    let delta = 0.3;
    let p = ProductTent { tent, dim: 1 };
    let q = ShiftedTent { tent, delta };
    let (lo, hi, steps) = (-1.0, 1.0 + delta, 230_000usize);
    let h = (hi - lo) / steps as f64;
    let mut tv = 0.0;
    for i in 0..=steps {
        let x = lo + i as f64 * h;
        let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
        tv += w * (tent.pdf(x) - tent.pdf(x - delta)).abs();
    }
    tv *= 0.5 * h;
    let trials = 20_000usize;
    let mut rng = stream(seed, Domain::Coupling, 6000, 0);
    let mut unequal = 0usize;
    for _ in 0..trials {
        let (x, y, equal) = maximal_coupling_sample(&p, &q, &mut rng)?;
        debug_assert_eq!(x.len(), y.len());
        if !equal {
            unequal += 1;
        }
    }
    let tv_err = (unequal as f64 / trials as f64 - tv).abs();

    // Gluing failure rate under the fitted linear bound, plus the noise
    // marginals of both coupled paths.
    let bundle = calibrated(cfg, seed)?;
    let (engine, kd, cal) = &*bundle;
    let trials_per = 100usize;
    let mut bound_ok = true;
    let mut rates = Vec::new();
    let mut eta_first = Vec::new();
    let mut eta_prime_first = Vec::new();
    for (si, scale) in [0.5, 0.25, 0.125].into_iter().enumerate() {
        let d = kd.d0 * scale;
        let mut glued = 0usize;
        for t in 0..trials_per {
            let mut rng = stream(seed, Domain::Coupling, 7000 + si as u64, t as u64);
            let u =
                sample_smooth_state(engine.basis(), cal.r0_star * rng.gen::<f64>(), &mut rng);
            let dir = sample_smooth_state(engine.basis(), 1.0, &mut rng);
            let mut up = u.clone();
            up.axpy(d, &dir);
            let out = near_step(engine, &u, &up, &mut rng)?;
            if out.glued_equal {
                glued += 1;
            }
            eta_first.push(out.eta.xi[0]);
            eta_prime_first.push(out.eta_prime.xi[0]);
        }
        let fail = (trials_per - glued) as f64 / trials_per as f64;
        rates.push(fail);
        // Out-of-sample check of the fitted bound: allow two sigmas of
        // binomial sampling noise around the bound probability.
        let p_bound = (cal.c1_hat * d).min(1.0);
        let allowance = 2.0 * (p_bound * (1.0 - p_bound) / trials_per as f64).sqrt();
        if fail > p_bound + allowance {
            bound_ok = false;
        }
    }
    let ks_thr = ks_threshold(eta_first.len(), 0.01);
    let ks_eta = ks_statistic(&eta_first, |x| engine.spec.density.cdf(x));
    let ks_eta_p = ks_statistic(&eta_prime_first, |x| engine.spec.density.cdf(x));

    let passed = tv_err <= 0.01 && bound_ok && ks_eta < ks_thr && ks_eta_p < ks_thr;
    Ok((
        passed,
        format!(
            "sampler TV error {tv_err:.4} <= 0.01 (analytic {tv:.4}); glue failure rates \
             {rates:?} under fitted bound slope {:.2}; noise KS {ks_eta:.3}/{ks_eta_p:.3} \
             < {ks_thr:.3}",
            cal.c1_hat
        ),
    ))
}

// ---------------------------------------------------------------------------
// 7. Step-shaped coupling distance
// ---------------------------------------------------------------------------

/// The top step equals 2.5 d0 exactly; every adjacent pair of table
/// entries satisfies the strict retention inequality; the function's range
/// is (2 d0, 3 d0] with the working-radius endpoint exactly 3 d0; and over
/// ten thousand random pairs it is sandwiched between the truncated norm
/// gap and three times the gap.
pub fn check_step_distance(cfg: &FullConfig, seed: u64) -> Check {
    outcome("step-distance", step_distance_body(cfg, seed))
}

fn step_distance_body(cfg: &FullConfig, seed: u64) -> Result<(bool, String)> {
    let bundle = calibrated(cfg, seed)?;
    let (engine, kd, _) = &*bundle;

    let top_exact = kd.a1 == 2.5 * kd.d0;
    let end_exact = kd.f_eval(kd.r_star) == 3.0 * kd.d0;

    // Retention at every entry, in the cancellation-free gap form:
    // p * gap(n) > gap(n-1) is exactly a_{n-1} > p a_n + (1-p) a1, but
    // survives the deep-table regime where the direct form loses the gap
    // below the rounding of the step values themselves.
    let gaps = kd.step_gaps();
    let mut retention_ok = gaps.len() == kd.step_count() && gaps[0] == 0.0;
    for n in 2..=kd.step_count() {
        if !(kd.p * gaps[n - 1] > gaps[n - 2]) || !(gaps[n - 1] > gaps[n - 2]) {
            retention_ok = false;
        }
    }

    let mut range_ok = true;
    for t in 0..=2000 {
        let x = kd.d0 * 1e-3
            + (kd.r_star * 1.5 - kd.d0 * 1e-3) * t as f64 / 2000.0;
        let fx = kd.f_eval(x);
        if !(fx > 2.0 * kd.d0 && fx <= 3.0 * kd.d0) {
            range_ok = false;
        }
    }

    let basis = engine.basis();
    let mut sandwich_err = 0.0f64;
    for t in 0..10_000u64 {
        let mut rng = stream(seed, Domain::InitialState, 600_000 + t, 0);
        let u = sample_smooth_state(basis, 1e-6 + 1.5 * kd.r_star * rng.gen::<f64>(), &mut rng);
        let v = sample_smooth_state(basis, 1e-6 + 1.5 * kd.r_star * rng.gen::<f64>(), &mut rng);
        let d = u.sub(&v).sobolev_norm(kd.index);
        let fk = f_k_eval(kd, &u, &v);
        let slack = 1e-12 * (1.0 + d);
        sandwich_err = sandwich_err.max(d.min(kd.d0) - fk - slack).max(fk - 3.0 * d - slack);
    }
    let sandwich_ok = sandwich_err <= 0.0;

    let passed = top_exact && end_exact && retention_ok && range_ok && sandwich_ok;
    Ok((
        passed,
        format!(
            "top step exact {top_exact}; endpoint exact {end_exact}; retention inequality \
             {retention_ok} over {} entries; range in (2 d0, 3 d0] {range_ok}; sandwich on \
             10^4 pairs {sandwich_ok}",
            kd.step_count()
        ),
    ))
}

// ---------------------------------------------------------------------------
// 8. Mixing decay
// ---------------------------------------------------------------------------

/// The coupled ensemble's mean coupling distance decays geometrically: the
/// fitted rate is below one with a 95% bootstrap band excluding one, the
/// mean at step 20 is at most a fifth of the initial mean, and the
/// functional-based lower bound never crosses the coupling upper bound.
pub fn check_mixing_decay(cfg: &FullConfig, seed: u64) -> Check {
    outcome("mixing-decay", mixing_decay_body(cfg, seed))
}

fn mixing_decay_body(cfg: &FullConfig, seed: u64) -> Result<(bool, String)> {
    let bundle = calibrated(cfg, seed)?;
    let (engine, kd, _) = &*bundle;
    let opts = cfg.ensemble_options(seed);
    let run = run_coupled_ensemble(engine, kd, &opts)?;
    let rep = &run.report;

    let kappa_ok = rep.fit.kappa < 1.0 && rep.band.1 < 1.0;
    let k_probe = 20usize.min(opts.horizon);
    let initial = rep.steps[0].mean_fk;
    let probed = rep.steps[k_probe].mean_fk;
    let decay_ok = probed <= 0.2 * initial;
    let mut bracket_ok = true;
    for s in &rep.steps {
        if s.lip_lower > s.lip_upper + 1e-12 {
            bracket_ok = false;
        }
    }

    let passed = kappa_ok && decay_ok && bracket_ok;
    Ok((
        passed,
        format!(
            "rate {:.4} < 1, band ({:.4}, {:.4}) excludes 1: {kappa_ok}; mean distance at \
             step {k_probe} = {probed:.3e} <= 0.2 x initial {initial:.3e}: {decay_ok}; \
             lower/upper bracket at every step: {bracket_ok} ({} pairs, horizon {})",
            rep.fit.kappa, rep.band.0, rep.band.1, opts.pairs, opts.horizon
        ),
    ))
}

// ---------------------------------------------------------------------------
// 9. Stationarity
// ---------------------------------------------------------------------------

/// Time-averaged moments from chains started at radius zero and at the
/// working radius agree within bootstrap bands after burn-in; with the
/// noise switched off every moment collapses below 1e-10.
pub fn check_stationarity(cfg: &FullConfig, seed: u64) -> Check {
    outcome("stationarity", stationarity_body(cfg, seed))
}

fn stationarity_body(cfg: &FullConfig, seed: u64) -> Result<(bool, String)> {
    let flow = cfg.flow_config()?;
    let spec = cfg.noise_spec()?;
    flow.validate_alignment(&spec)?;
    let (grid, basis) = state_space(&flow)?;
    let prop = Propagator::new(&grid, flow)?;
    let modes = ModeBasis::new(&basis, spec.spatial_modes)?;
    let drift = drift_constants(&flow, &spec, seed, &cfg.calibration_options())?;

    let burn = default_burn_in(drift.gamma, drift.r_star, drift.r0_star);
    let opts = cfg.stationary_options(seed, burn, drift.r_star);
    let rep = estimate_stationary(&prop, Some((&spec, &modes)), &basis, &opts)?;

    let zero_opts = StationaryOptions {
        chains: 4,
        samples: 8,
        burn_in: 60,
        shells: opts.shells,
        radius_high: drift.r_star,
        resamples: 40,
        seed,
    };
    let rep0 = estimate_stationary(&prop, None, &basis, &zero_opts)?;
    let dirac_max = rep0
        .low
        .iter()
        .chain(rep0.high.iter())
        .map(|b| b.mean.abs())
        .fold(0.0f64, f64::max);

    let passed = rep.agree && rep0.agree && dirac_max < 1e-10;
    Ok((
        passed,
        format!(
            "two-start moments agree: {} (burn-in {}, support max {:.3}); zero-noise \
             moments {dirac_max:.2e} < 1e-10",
            rep.agree, rep.burn_in, rep.support_max
        ),
    ))
}

// ---------------------------------------------------------------------------
// 10. Determinism
// ---------------------------------------------------------------------------

fn bits(x: f64) -> u64 {
    x.to_bits()
}

/// Re-running every pipeline with the same seed reproduces bitwise
/// identical output: noise paths, flow maps, drift refits, a coupled
/// ensemble (including its parallel reduction and bootstrap), and the
/// stationary estimate.
pub fn check_determinism(cfg: &FullConfig, seed: u64) -> Check {
    outcome("determinism", determinism_body(cfg, seed))
}

fn determinism_body(cfg: &FullConfig, seed: u64) -> Result<(bool, String)> {
    let flow = cfg.flow_config()?;
    let spec = cfg.noise_spec()?;
    flow.validate_alignment(&spec)?;
    let (grid, basis) = state_space(&flow)?;
    let prop = Propagator::new(&grid, flow)?;
    let modes = ModeBasis::new(&basis, spec.spatial_modes)?;

    let path_once = || NoisePath::sample(&spec, &mut stream(seed, Domain::NoisePath, 5, 0));
    let path_ok = path_once().xi.iter().map(|x| bits(*x)).collect::<Vec<_>>()
        == path_once().xi.iter().map(|x| bits(*x)).collect::<Vec<_>>();

    let flow_once = || -> Result<Vec<u64>> {
        let u0 = sample_smooth_state(&basis, 0.7, &mut stream(seed, Domain::InitialState, 900, 0));
        let u1 = flow_map(&prop, &u0, &spec, &path_once(), &modes)?;
        Ok(basis.flatten(&u1).iter().map(|x| bits(*x)).collect())
    };
    let flow_ok = flow_once()? == flow_once()?;

    let drift_once = || -> Result<[u64; 4]> {
        let d = drift_constants(&flow, &spec, seed, &cfg.calibration_options())?;
        Ok([bits(d.gamma), bits(d.beta), bits(d.r0_star), bits(d.r_star)])
    };
    let drift_ok = drift_once()? == drift_once()?;

    let bundle = calibrated(cfg, seed)?;
    let (engine, kd, cal) = &*bundle;
    let ens_once = || -> Result<String> {
        let opts = EnsembleOptions {
            pairs: 4,
            horizon: 8,
            radius: 0.0,
            distance_schedule: Vec::new(),
            functionals: 8,
            resamples: 20,
            seed,
        };
        let run = run_coupled_ensemble(engine, kd, &opts)?;
        Ok(format!(
            "{}{}{}",
            csvio::mixing_steps_table(&run.report.steps).render(),
            csvio::step_log_table(&run.records).render(),
            csvio::mixing_summary_table(&run.report, kd, cal).render(),
        ))
    };
    let ens_ok = ens_once()? == ens_once()?;

    let stat_once = || -> Result<String> {
        let opts = StationaryOptions {
            chains: 2,
            samples: 4,
            burn_in: 3,
            shells: 2,
            radius_high: 1.0,
            resamples: 20,
            seed,
        };
        let rep = estimate_stationary(&prop, Some((&spec, &modes)), &basis, &opts)?;
        Ok(csvio::stationary_table(&rep).render())
    };
    let stat_ok = stat_once()? == stat_once()?;

    let passed = path_ok && flow_ok && drift_ok && ens_ok && stat_ok;
    Ok((
        passed,
        format!(
            "bitwise reruns — noise path {path_ok}, flow map {flow_ok}, drift refit \
             {drift_ok}, coupled ensemble {ens_ok}, stationary estimate {stat_ok}"
        ),
    ))
}

// ---------------------------------------------------------------------------
// The suite
// ---------------------------------------------------------------------------

/// Every check in order. Returns one (name, passed, detail) row per check;
/// `verbose` streams progress to stderr as checks start and finish.
pub fn run_suite(cfg: &FullConfig, seed: u64, verbose: bool) -> Result<Vec<(String, bool, String)>> {
    let checks: [(&'static str, fn(&FullConfig, u64) -> Check); 10] = [
        ("noise-basis", check_noise_basis),
        ("flow-solvers", check_flow_solvers),
        ("derivatives", check_derivatives),
        ("right-inverse", check_right_inverse),
        ("squeezing", check_squeezing),
        ("coupling-tv", check_coupling_tv),
        ("step-distance", check_step_distance),
        ("mixing-decay", check_mixing_decay),
        ("stationarity", check_stationarity),
        ("determinism", check_determinism),
    ];
    let mut rows = Vec::with_capacity(checks.len());
    for (name, f) in checks {
        if verbose {
            eprintln!("[verify] running {name}");
        }
        let c = f(cfg, seed);
        if verbose {
            eprintln!("[verify] {name}: {}", if c.passed { "pass" } else { "FAIL" });
        }
        rows.push((c.name.to_string(), c.passed, c.detail));
    }
    Ok(rows)
}
