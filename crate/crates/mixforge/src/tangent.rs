//! Exact derivatives of the discrete flow maps.
//!
//! The tangent solver differentiates the *scheme*, not the equation: every
//! substep applies the exact Jacobian of the corresponding primal substep,
//! replaying the stored physical-space samples of the base trajectory. The
//! adjoint solver is the exact transpose of the tangent with respect to the
//! flat (exponent-0) real inner product, built by transposing each
//! elementary operation in reverse order. Consequently the pairing
//! <v_n, w_n> between a homogeneous tangent sweep and an adjoint sweep is
//! constant along the trajectory up to rounding, which the tests pin down.
//!
//! The same machinery assembles the one-step noise-to-state response: one
//! tangent solve per noise coefficient, forced by that coefficient's
//! amplitude-weighted Haar profile, skipping substeps before the profile's
//! support.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::field::{FieldKind, ModeBasis, SpectralField, StateBasis};
use crate::haar::{haar_eval, shifts_at, CoeffIndex, NoiseSpec};
use crate::models::{run_flow, ModelKind, Propagator, ReplayCell, Trajectory};

/// Inhomogeneous term of a tangent sweep.
pub enum Forcing<'a> {
    /// Homogeneous: the derivative with respect to the initial state only.
    None,
    /// Derivative with respect to the path, in the direction of these
    /// per-cell constant fields.
    Cells(&'a [SpectralField]),
    /// Derivative with respect to one noise coefficient: the
    /// amplitude-weighted Haar profile of `index` on spatial mode
    /// `index.mode`.
    Haar { spec: &'a NoiseSpec, modes: &'a ModeBasis, index: CoeffIndex },
}

/// Substep range [start, end) on which a Haar profile is non-zero.
fn haar_support(index: &CoeffIndex, cells: usize, substeps: usize) -> (usize, usize) {
    let per_cell = substeps / cells;
    if index.level < 0 {
        (0, substeps)
    } else {
        let span = cells / shifts_at(index.level);
        (index.shift * span * per_cell, (index.shift + 1) * span * per_cell)
    }
}

/// Multiply a field by the Duhamel weight table.
fn duhamel_weight(prop: &Propagator, f: &SpectralField) -> SpectralField {
    let mut out = f.clone();
    for c in &mut out.comps {
        c.zip_mut_with(&prop.duh, |z, &d| *z *= d);
    }
    out
}

pub struct TangentOutput {
    pub terminal: SpectralField,
    /// All substep states v_0 .. v_N when requested.
    pub states: Option<Vec<SpectralField>>,
}

fn require_replay(traj: &Trajectory) -> Result<()> {
    if traj.replay.len() != traj.prop.cfg.substeps {
        return Err(Error::Validation(
            "trajectory lacks replay data; rerun the flow with recording enabled".into(),
        ));
    }
    Ok(())
}

/// Directional derivative of the one-step flow map along the base
/// trajectory: initial direction `v0` (None = zero) plus the path
/// perturbation described by `forcing`.
pub fn tangent_flow(
    traj: &Trajectory,
    v0: Option<&SpectralField>,
    forcing: Forcing,
    keep_states: bool,
) -> Result<TangentOutput> {
    require_replay(traj)?;
    let prop = &traj.prop;
    let substeps = prop.cfg.substeps;
    let kind = prop.cfg.field_kind();

    // Resolve the forcing into a per-substep additive spectral term
    // (already Duhamel-weighted): substep n receives coef(n) * base_field.
    let mut cell_terms: Vec<SpectralField> = Vec::new();
    let mut haar_term: Option<(SpectralField, Vec<f64>)> = None;
    let mut start = 0usize;
    match &forcing {
        Forcing::None => {}
        Forcing::Cells(cells) => {
            if substeps % cells.len() != 0 {
                return Err(Error::Validation(format!(
                    "substep count {} is not a multiple of the {} forcing cells",
                    substeps,
                    cells.len()
                )));
            }
            cell_terms = cells.iter().map(|f| duhamel_weight(prop, f)).collect();
        }
        Forcing::Haar { spec, modes, index } => {
            prop.cfg.validate_alignment(spec)?;
            let dphi = duhamel_weight(prop, modes.field(index.mode));
            let cells = spec.cells();
            let amp = spec.amplitude(index.mode, index.level);
            let coefs: Vec<f64> = (0..substeps)
                .map(|n| {
                    let cell = n * cells / substeps;
                    let t = (cell as f64 + 0.5) / cells as f64;
                    amp * haar_eval(index.level, index.shift, t).expect("valid Haar index")
                })
                .collect();
            if v0.is_none() {
                start = haar_support(index, cells, substeps).0;
            }
            haar_term = Some((dphi, coefs));
        }
    }

    let mut v = match v0 {
        Some(f) => prop.conform(f),
        None => SpectralField::zeros(&prop.grid, kind),
    };
    let mut states = keep_states.then(|| {
        let mut s = Vec::with_capacity(substeps + 1);
        for _ in 0..start {
            s.push(SpectralField::zeros(&prop.grid, kind));
        }
        s.push(v.clone());
        s
    });

    for n in start..substeps {
        let add: Option<(f64, &SpectralField)> = match &forcing {
            Forcing::None => None,
            Forcing::Cells(cells) => {
                Some((1.0, &cell_terms[n * cells.len() / substeps]))
            }
            Forcing::Haar { .. } => {
                let (dphi, coefs) = haar_term.as_ref().unwrap();
                (coefs[n] != 0.0).then_some((coefs[n], dphi))
            }
        };
        match &traj.replay[n] {
            ReplayCell::Nse { u_phys, grad_phys } => {
                nse_tangent_substep(prop, &mut v, u_phys, grad_phys, add)
            }
            ReplayCell::Cgl { pre_rot_phys } => {
                let r = match prop.cfg.model {
                    ModelKind::Cgl { r, .. } => r,
                    _ => unreachable!("scalar replay under velocity model"),
                };
                cgl_tangent_substep(prop, &mut v, pre_rot_phys, add, r)
            }
        }
        if let Some(s) = states.as_mut() {
            s.push(v.clone());
        }
    }
    Ok(TangentOutput { terminal: v, states })
}

fn nse_tangent_substep(
    prop: &Propagator,
    v: &mut SpectralField,
    u_phys: &[Array2<Complex64>],
    grad_phys: &[Array2<Complex64>],
    add: Option<(f64, &SpectralField)>,
) {
    let grid = &prop.grid;
    let v_phys = v.to_physical();
    let mut dv = Vec::with_capacity(4);
    for comp in 0..2 {
        for axis in 0..2 {
            let mut d = v.derivative(comp, axis);
            grid.to_physical(&mut d);
            dv.push(d);
        }
    }
    // Y = P of dealiased ( (u.grad) v + (v.grad) u )
    let mut y = SpectralField::zeros(grid, FieldKind::Velocity2d);
    for comp in 0..2 {
        let mut prod = Array2::zeros(v_phys[0].dim());
        ndarray::Zip::from(&mut prod)
            .and(&u_phys[0])
            .and(&u_phys[1])
            .and(&dv[2 * comp])
            .and(&dv[2 * comp + 1])
            .for_each(|p, &u1, &u2, &gx, &gy| *p = u1 * gx + u2 * gy);
        ndarray::Zip::from(&mut prod)
            .and(&v_phys[0])
            .and(&v_phys[1])
            .and(&grad_phys[2 * comp])
            .and(&grad_phys[2 * comp + 1])
            .for_each(|p, &v1, &v2, &gx, &gy| *p += v1 * gx + v2 * gy);
        grid.to_spectral(&mut prod);
        y.comps[comp] = prod;
    }
    y.leray_project();
    y.dealias();
    for comp in 0..2 {
        let yc = &y.comps[comp];
        let vc = &mut v.comps[comp];
        for ((idx, z), (&l, &d)) in
            vc.indexed_iter_mut().zip(prop.lin.iter().zip(prop.duh.iter()))
        {
            *z = l * *z - d * yc[idx];
        }
    }
    if let Some((coef, f)) = add {
        v.axpy(coef, f);
    }
}

fn cgl_tangent_substep(
    prop: &Propagator,
    v: &mut SpectralField,
    pre_rot_phys: &Array2<Complex64>,
    add: Option<(f64, &SpectralField)>,
    r: u32,
) {
    // Linear + forcing part of the substep's Jacobian.
    {
        let vc = &mut v.comps[0];
        for (z, &l) in vc.iter_mut().zip(prop.lin.iter()) {
            *z *= l;
        }
    }
    if let Some((coef, f)) = add {
        v.axpy(coef, f);
    }
    // Derivative of the pointwise rotation at the pre-rotation state.
    let grid = &prop.grid;
    let mut phys = v.comps[0].clone();
    grid.to_physical(&mut phys);
    let h = prop.h;
    ndarray::Zip::from(&mut phys).and(pre_rot_phys).for_each(|z, &ut| {
        let nsq = ut.norm_sqr();
        let alpha = Complex64::from_polar(1.0, -h * nsq.powi(r as i32));
        let radial = 2.0 * r as f64 * h * nsq.powi(r as i32 - 1);
        let inner = (ut.conj() * *z).re;
        *z = alpha * (*z - Complex64::i() * radial * inner * ut);
    });
    grid.to_spectral(&mut phys);
    v.comps[0] = phys;
    v.dealias();
}

/// Backward sweep of the exact transpose of the tangent map, from a terminal
/// weight. Returns the weights w_0 .. w_N in forward time order
/// (w_N = the given terminal weight).
pub fn adjoint_flow(traj: &Trajectory, w_terminal: &SpectralField) -> Result<Vec<SpectralField>> {
    Ok(adjoint_sweep(traj, w_terminal, false)?.0)
}

/// Like [`adjoint_flow`], but also returns, per substep n, the state a
/// forcing term injected at substep n pairs against in the flat inner
/// product. For the velocity model forcing enters after the whole substep,
/// so this is w_{n+1}; for the scalar model it enters before the rotation,
/// so the rotation's transpose is applied first.
pub fn adjoint_flow_with_pairing(
    traj: &Trajectory,
    w_terminal: &SpectralField,
) -> Result<(Vec<SpectralField>, Vec<SpectralField>)> {
    adjoint_sweep(traj, w_terminal, true)
}

fn adjoint_sweep(
    traj: &Trajectory,
    w_terminal: &SpectralField,
    want_pairing: bool,
) -> Result<(Vec<SpectralField>, Vec<SpectralField>)> {
    require_replay(traj)?;
    let prop = &traj.prop;
    let substeps = prop.cfg.substeps;
    let mut states = Vec::with_capacity(substeps + 1);
    let mut pairing = Vec::with_capacity(if want_pairing { substeps } else { 0 });
    let mut w = w_terminal.clone();
    states.push(w.clone());
    for n in (0..substeps).rev() {
        match &traj.replay[n] {
            ReplayCell::Nse { u_phys, grad_phys } => {
                if want_pairing {
                    pairing.push(w.clone());
                }
                nse_adjoint_substep(prop, &mut w, u_phys, grad_phys)
            }
            ReplayCell::Cgl { pre_rot_phys } => {
                let r = match prop.cfg.model {
                    ModelKind::Cgl { r, .. } => r,
                    _ => unreachable!("scalar replay under velocity model"),
                };
                let rotated = cgl_adjoint_substep(prop, &mut w, pre_rot_phys, r);
                if want_pairing {
                    pairing.push(rotated);
                }
            }
        }
        states.push(w.clone());
    }
    states.reverse();
    pairing.reverse();
    Ok((states, pairing))
}

fn nse_adjoint_substep(
    prop: &Propagator,
    w: &mut SpectralField,
    u_phys: &[Array2<Complex64>],
    grad_phys: &[Array2<Complex64>],
) {
    let grid = &prop.grid;
    let n = grid.n();
    // g = dealias(P(D .* w)) — transpose of the tangent's trailing chain.
    let mut g = SpectralField::zeros(grid, FieldKind::Velocity2d);
    for comp in 0..2 {
        let mut gc = w.comps[comp].clone();
        gc.zip_mut_with(&prop.duh, |z, &d| *z *= d.conj());
        g.comps[comp] = gc;
    }
    g.leray_project();
    g.dealias();
    let g_phys = g.to_physical();
    // Transpose of the advection terms:
    //   out_a = -sum_b d_b (u_b g_a)  +  sum_c (d_a u_c) g_c
    // with products taken pointwise before the transform.
    let mut out = SpectralField::zeros(grid, FieldKind::Velocity2d);
    for a in 0..2 {
        let mut acc = Array2::<Complex64>::zeros((n, n));
        for b in 0..2 {
            let mut prod = Array2::zeros((n, n));
            ndarray::Zip::from(&mut prod)
                .and(&u_phys[b])
                .and(&g_phys[a])
                .for_each(|p, &u, &gg| *p = u * gg);
            grid.to_spectral(&mut prod);
            for i in 0..n {
                for j in 0..n {
                    let k = if b == 0 { grid.k_of(i) } else { grid.k_of(j) } as f64;
                    acc[[i, j]] -= Complex64::new(0.0, k) * prod[[i, j]];
                }
            }
        }
        let mut prod2 = Array2::zeros((n, n));
        ndarray::Zip::from(&mut prod2)
            .and(&grad_phys[a])
            .and(&g_phys[0])
            .and(&grad_phys[2 + a])
            .and(&g_phys[1])
            .for_each(|p, &ga, &g0, &gb, &g1| *p = ga * g0 + gb * g1);
        grid.to_spectral(&mut prod2);
        acc.zip_mut_with(&prod2, |x, y| *x += *y);
        out.comps[a] = acc;
    }
    for comp in 0..2 {
        let oc = &out.comps[comp];
        let wc = &mut w.comps[comp];
        for ((idx, z), &l) in wc.indexed_iter_mut().zip(prop.lin.iter()) {
            *z = l.conj() * *z - oc[idx];
        }
    }
}

/// Returns the intermediate after the rotation's transpose (the state a
/// pre-rotation forcing term pairs against).
fn cgl_adjoint_substep(
    prop: &Propagator,
    w: &mut SpectralField,
    pre_rot_phys: &Array2<Complex64>,
    r: u32,
) -> SpectralField {
    let grid = &prop.grid;
    let mut g = w.clone();
    g.dealias();
    let mut phys = g.comps[0].clone();
    grid.to_physical(&mut phys);
    let h = prop.h;
    ndarray::Zip::from(&mut phys).and(pre_rot_phys).for_each(|z, &ut| {
        let nsq = ut.norm_sqr();
        let alpha = Complex64::from_polar(1.0, -h * nsq.powi(r as i32));
        let beta = -Complex64::i() * (2.0 * r as f64 * h * nsq.powi(r as i32 - 1)) * alpha;
        let c = (beta * ut * z.conj()).re;
        *z = alpha.conj() * *z + c * ut;
    });
    grid.to_spectral(&mut phys);
    let mut rotated = SpectralField::zeros(grid, FieldKind::ComplexScalar);
    rotated.comps[0] = phys.clone();
    let wc = &mut w.comps[0];
    for ((idx, z), &l) in wc.indexed_iter_mut().zip(prop.lin.iter()) {
        *z = l.conj() * phys[idx];
    }
    rotated
}

/// Second-order remainder check of the tangent solver: for each epsilon,
/// | S(u0 + eps v) - S(u0) - eps DS v | / eps^2 in the state norm. The
/// spread max/min - 1 over the epsilon ladder should stay below 25% when
/// the tangent is the exact derivative.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub ratios: Vec<f64>,
    pub spread: f64,
}

pub fn fd_check(
    traj: &Trajectory,
    cells: &[SpectralField],
    guard: f64,
    dir: &SpectralField,
    eps: &[f64],
) -> Result<FdReport> {
    let prop = &traj.prop;
    let v = prop.conform(dir);
    let t = tangent_flow(traj, Some(&v), Forcing::None, false)?;
    let index = prop.cfg.index;
    let mut ratios = Vec::with_capacity(eps.len());
    for &e in eps {
        let mut u0 = traj.initial.clone();
        u0.axpy(e, &v);
        let pert = run_flow(prop, &u0, cells, guard, false)?;
        let mut diff = pert.terminal.sub(&traj.terminal);
        diff.axpy(-e, &t.terminal);
        ratios.push(diff.sobolev_norm(index) / (e * e));
    }
    let mx = ratios.iter().cloned().fold(f64::MIN, f64::max);
    let mn = ratios.iter().cloned().fold(f64::MAX, f64::min);
    Ok(FdReport { ratios, spread: mx / mn - 1.0 })
}

/// Dense one-step noise-to-state response at a base trajectory, in
/// state-basis coordinates (rows) by canonical coefficient order (columns),
/// with the diagonal noise Gram (squared amplitudes).
pub struct TangentOperator {
    pub basis: Arc<StateBasis>,
    pub matrix: DMatrix<f64>,
    pub gram_e: DVector<f64>,
    pub columns: Vec<CoeffIndex>,
}

impl TangentOperator {
    /// A zeta in coefficient coordinates -> state coordinates.
    pub fn apply(&self, zeta: &DVector<f64>) -> DVector<f64> {
        &self.matrix * zeta
    }

    /// Adjoint with respect to the noise and state inner products:
    /// A* w = Ge^{-1} A^T w (state coordinates are orthonormal).
    pub fn adjoint_apply(&self, w: &DVector<f64>) -> DVector<f64> {
        let mut out = self.matrix.tr_mul(w);
        for i in 0..out.len() {
            out[i] /= self.gram_e[i];
        }
        out
    }
}

/// One tangent solve per noise coefficient, skipping the substeps before
/// the coefficient's Haar support.
pub fn assemble_tangent_operator(
    traj: &Trajectory,
    spec: &NoiseSpec,
    modes: &ModeBasis,
    basis: &Arc<StateBasis>,
) -> Result<TangentOperator> {
    assemble_leading_columns(traj, spec, modes, basis, spec.dim())
}

/// The first `ncols` canonical columns only. Control solves restrict the
/// shift to a leading coefficient block, so they never pay for the
/// remaining columns.
pub fn assemble_leading_columns(
    traj: &Trajectory,
    spec: &NoiseSpec,
    modes: &ModeBasis,
    basis: &Arc<StateBasis>,
    ncols: usize,
) -> Result<TangentOperator> {
    traj.prop.cfg.validate_alignment(spec)?;
    if ncols == 0 || ncols > spec.dim() {
        return Err(Error::Validation(format!(
            "column count {} outside 1..={}",
            ncols,
            spec.dim()
        )));
    }
    let mut columns = spec.coeff_indices();
    columns.truncate(ncols);
    let mut matrix = DMatrix::zeros(basis.dim(), columns.len());
    let mut gram_e = DVector::zeros(columns.len());
    for (c, idx) in columns.iter().enumerate() {
        let out = tangent_flow(traj, None, Forcing::Haar { spec, modes, index: *idx }, false)?;
        matrix.set_column(c, &basis.flatten(&out.terminal));
        let amp = spec.amplitude(idx.mode, idx.level);
        gram_e[c] = amp * amp;
    }
    Ok(TangentOperator { basis: basis.clone(), matrix, gram_e, columns })
}

/// A* w computed without the matrix: one adjoint sweep from the
/// Sobolev-weighted terminal state, then inner products against each
/// coefficient's forcing profile. Cross-validates the assembled matrix.
pub fn adjoint_apply_via_flow(
    traj: &Trajectory,
    spec: &NoiseSpec,
    modes: &ModeBasis,
    w: &SpectralField,
) -> Result<DVector<f64>> {
    let prop = &traj.prop;
    prop.cfg.validate_alignment(spec)?;
    let substeps = prop.cfg.substeps;
    let cells = spec.cells();
    let mut lam = w.clone();
    lam.sobolev_scale(prop.cfg.index);
    let (_, pairing) = adjoint_flow_with_pairing(traj, &lam)?;
    // ip[i][n] = < D phi_i , pairing state of substep n > (flat inner
    // product); the pairing state absorbs any substep structure between the
    // forcing entry point and the end of the substep.
    let mut ip = vec![vec![0.0; substeps]; spec.spatial_modes];
    for (i, row) in ip.iter_mut().enumerate() {
        let dphi = duhamel_weight(prop, modes.field(i));
        for (n, slot) in row.iter_mut().enumerate() {
            *slot = dphi.sobolev_inner(&pairing[n], 0.0);
        }
    }
    let columns = spec.coeff_indices();
    let mut out = DVector::zeros(columns.len());
    for (c, idx) in columns.iter().enumerate() {
        let amp = spec.amplitude(idx.mode, idx.level);
        let (lo, hi) = haar_support(idx, cells, substeps);
        let mut acc = 0.0;
        for n in lo..hi {
            let cell = n * cells / substeps;
            let t = (cell as f64 + 0.5) / cells as f64;
            let hval = haar_eval(idx.level, idx.shift, t).expect("valid Haar index");
            acc += hval * ip[idx.mode][n];
        }
        out[c] = amp * acc / (amp * amp);
    }
    Ok(out)
}
