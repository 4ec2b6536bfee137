//! Regularized approximate right inverse of the noise-to-state response.
//!
//! For the assembled response A (state coordinates by noise coefficients)
//! with diagonal noise Gram Ge, the inverse of regularization r truncated
//! to the first M canonical coefficients is
//!
//!   R_{r,M} f = A_M* (G_M + r I)^{-1} f,
//!
//! where A_M keeps the first M columns of A, A_M* = Ge_M^{-1} A_M^T and
//! G_M = A_M Ge_M^{-1} A_M^T. Using the Gram of the *truncated* operator —
//! rather than resolving through the full Gram and truncating afterwards —
//! is what makes the defect exactly non-increasing as r decreases at fixed
//! M (the defect operator is r (G_M + rI)^{-1}, a monotone function of a
//! fixed symmetric matrix); with the full Gram the truncated defect
//! diverges as r -> 0.
//!
//! The solve itself goes through the coefficient side. With the
//! unit-noise-norm columns U = A_M Ge_M^{-1/2}, the push-through identity
//! U^T (U U^T + rI)^{-1} = (U^T U + rI)^{-1} U^T turns the state-space
//! resolvent into an M-by-M symmetric positive definite solve — exact
//! algebra, one Cholesky factorization per (r, M) reused across all
//! right-hand sides, and no subtractive cancellation anywhere (unlike the
//! Woodbury rearrangement (f - U (rI + U^T U)^{-1} U^T f)/r, which loses
//! all digits as r approaches rounding scale). The control engine rebuilds
//! an inverse at every linearization point, so the solve must not scale
//! with the cube of the state dimension. Calibration sweeps a logarithmic
//! (r, M) lattice, checks the defect monotonicity along r down and M up,
//! and returns the smallest-M, largest-r point meeting the target defect.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::tangent::TangentOperator;

/// G = A Ge^{-1} A^T, symmetrized to machine precision.
pub fn build_gram(op: &TangentOperator) -> DMatrix<f64> {
    let u = scaled_columns(op);
    let mut g = &u * u.transpose();
    for i in 0..g.nrows() {
        for j in 0..i {
            let s = 0.5 * (g[(i, j)] + g[(j, i)]);
            g[(i, j)] = s;
            g[(j, i)] = s;
        }
    }
    g
}

/// U = A Ge^{-1/2}: columns scaled to unit noise norm.
fn scaled_columns(op: &TangentOperator) -> DMatrix<f64> {
    let mut u = op.matrix.clone();
    for c in 0..u.ncols() {
        let s = 1.0 / op.gram_e[c].sqrt();
        u.column_mut(c).scale_mut(s);
    }
    u
}

#[derive(Debug)]
pub struct RightInverse {
    pub r: f64,
    pub m: usize,
    dim_e: usize,
    /// U_M = A_M Ge_M^{-1/2}: retained columns at unit noise norm.
    u_m: DMatrix<f64>,
    /// Ge_M^{-1/2} diagonal, mapping small-solve output to raw coefficients.
    inv_sqrt_ge: DVector<f64>,
    /// Cholesky factorization of U_M^T U_M + rI (M by M).
    chol: Cholesky<f64, Dyn>,
}

/// Result of one inverse application.
pub struct ApplyOutcome {
    /// Noise-coefficient vector, zero beyond the first m entries.
    pub zeta: DVector<f64>,
    /// Residual norm |A R f - f| in state coordinates.
    pub defect: f64,
}

impl RightInverse {
    pub fn new(op: &TangentOperator, r: f64, m: usize) -> Result<RightInverse> {
        if !(r > 0.0) {
            return Err(Error::Validation(format!("regularization must be positive, got {r}")));
        }
        let dim_e = op.matrix.ncols();
        if m == 0 || m > dim_e {
            return Err(Error::Validation(format!(
                "projection dimension {m} outside 1..={dim_e}"
            )));
        }
        let mut u_m = op.matrix.columns(0, m).into_owned();
        let mut inv_sqrt_ge = DVector::zeros(m);
        for c in 0..m {
            let s = 1.0 / op.gram_e[c].sqrt();
            u_m.column_mut(c).scale_mut(s);
            inv_sqrt_ge[c] = s;
        }
        let mut small = u_m.tr_mul(&u_m);
        for i in 0..m {
            small[(i, i)] += r;
        }
        let chol = Cholesky::new(small).ok_or_else(|| {
            Error::Calibration(format!("Gram factorization failed at r = {r}"))
        })?;
        Ok(RightInverse { r, m, dim_e, u_m, inv_sqrt_ge, chol })
    }

    /// Apply the inverse to a state-coordinate vector and report the defect.
    pub fn apply(&self, f: &DVector<f64>) -> ApplyOutcome {
        let y = self.chol.solve(&self.u_m.tr_mul(f));
        let defect = (&self.u_m * &y - f).norm();
        let mut zeta = DVector::zeros(self.dim_e);
        for i in 0..self.m {
            zeta[i] = self.inv_sqrt_ge[i] * y[i];
        }
        ApplyOutcome { zeta, defect }
    }

    /// Power-iteration estimate of the operator norm from state coordinates
    /// to the amplitude-weighted coefficient norm (in which the small-solve
    /// output y already is: |R f|_E = |y|).
    pub fn norm_estimate(&self) -> f64 {
        let dim_h = self.u_m.nrows();
        let mut x = DVector::from_element(dim_h, 1.0 / (dim_h as f64).sqrt());
        let mut lambda = 0.0;
        for _ in 0..60 {
            // x <- T^T T x with T f = (U^T U + rI)^{-1} U^T f.
            let y = self.chol.solve(&self.u_m.tr_mul(&x));
            let z = self.chol.solve(&y);
            let mut next = &self.u_m * &z;
            lambda = next.norm();
            if lambda == 0.0 {
                return 0.0;
            }
            next /= lambda;
            x = next;
        }
        lambda.sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationRow {
    pub r: f64,
    pub m: usize,
    pub max_defect_ratio: f64,
    pub operator_norm_estimate: f64,
}

/// Defaults of the calibration lattice: r = 10^0 .. 10^-8, M = 4, 8, 16, ...
/// up to the full coefficient dimension.
pub fn default_r_lattice() -> Vec<f64> {
    (0..=8).map(|k| 10f64.powi(-k)).collect()
}

pub fn default_m_lattice(dim_e: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut m = 4;
    while m < dim_e {
        out.push(m);
        m *= 2;
    }
    out.push(dim_e);
    out
}

/// Evaluate the defect ratio max_f |A R f - f| / vnorm(f) on every lattice
/// point. `test_set` pairs state-coordinate vectors with their smoothness
/// norms. Rows are ordered M ascending, r descending within M.
pub fn sweep(
    op: &TangentOperator,
    test_set: &[(DVector<f64>, f64)],
    r_lattice: &[f64],
    m_lattice: &[usize],
) -> Result<Vec<CalibrationRow>> {
    if test_set.is_empty() {
        return Err(Error::Validation("calibration needs a non-empty test set".into()));
    }
    for (_, v) in test_set {
        if !(*v > 0.0) {
            return Err(Error::Validation("test fields must have positive smoothness norm".into()));
        }
    }
    let mut rs: Vec<f64> = r_lattice.to_vec();
    rs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut ms: Vec<usize> = m_lattice.to_vec();
    ms.sort_unstable();
    let mut rows = Vec::with_capacity(rs.len() * ms.len());
    for &m in &ms {
        for &r in &rs {
            let ri = RightInverse::new(op, r, m)?;
            let mut worst = 0.0f64;
            for (f, vnorm) in test_set {
                let out = ri.apply(f);
                worst = worst.max(out.defect / vnorm);
            }
            rows.push(CalibrationRow {
                r,
                m,
                max_defect_ratio: worst,
                operator_norm_estimate: ri.norm_estimate(),
            });
        }
    }
    Ok(rows)
}

/// Count violations of the defect monotonicity contract on a sweep table:
/// within fixed M the ratio must not grow as r decreases, and within fixed r
/// it must not grow as M increases (relative slack `slack`).
pub fn monotonicity_violations(rows: &[CalibrationRow], slack: f64) -> usize {
    let mut bad = 0;
    for w in rows.windows(2) {
        if w[0].m == w[1].m && w[1].r < w[0].r {
            if w[1].max_defect_ratio > w[0].max_defect_ratio * (1.0 + slack) {
                bad += 1;
            }
        }
    }
    for a in rows {
        for b in rows {
            if a.r == b.r && b.m > a.m && b.max_defect_ratio > a.max_defect_ratio * (1.0 + slack)
            {
                bad += 1;
            }
        }
    }
    bad
}

/// Pick the smallest-M, largest-r lattice point whose worst-case defect
/// ratio meets `eps`, returning the built inverse and the full sweep table.
pub fn calibrate(
    op: &TangentOperator,
    test_set: &[(DVector<f64>, f64)],
    eps: f64,
    r_lattice: &[f64],
    m_lattice: &[usize],
) -> Result<(RightInverse, Vec<CalibrationRow>)> {
    let rows = sweep(op, test_set, r_lattice, m_lattice)?;
    let mut best: Option<&CalibrationRow> = None;
    for row in &rows {
        if row.max_defect_ratio <= eps {
            let better = match best {
                None => true,
                Some(b) => row.m < b.m || (row.m == b.m && row.r > b.r),
            };
            if better {
                best = Some(row);
            }
        }
    }
    match best {
        Some(row) => Ok((RightInverse::new(op, row.r, row.m)?, rows)),
        None => {
            let min = rows
                .iter()
                .min_by(|a, b| a.max_defect_ratio.partial_cmp(&b.max_defect_ratio).unwrap())
                .unwrap();
            Err(Error::Calibration(format!(
                "no lattice point meets defect ratio {eps}; achievable minimum {} at r = {}, M = {}",
                min.max_defect_ratio, min.r, min.m
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{FieldKind, ModeBasis, StateBasis};
    use crate::grid::Grid;
    use crate::haar::{CoeffIndex, NoisePath, NoiseSpec};
    use crate::models::{guard_level, run_flow, FlowConfig, ModelKind, Propagator};
    use crate::rng::{stream, Domain};
    use crate::tangent::assemble_tangent_operator;
    use rand::Rng;
    use std::sync::Arc;

    fn synthetic_op(matrix: DMatrix<f64>) -> TangentOperator {
        let grid = Grid::new(8).unwrap();
        let basis = Arc::new(StateBasis::new(&grid, FieldKind::Velocity2d, 1.0));
        assert_eq!(basis.dim(), matrix.nrows(), "synthetic operators use the n=8 state space");
        let cols = matrix.ncols();
        TangentOperator {
            basis,
            matrix,
            gram_e: DVector::from_element(cols, 1.0),
            columns: (0..cols).map(|c| CoeffIndex { mode: c, level: -1, shift: 0 }).collect(),
        }
    }

    fn dim_h() -> usize {
        let grid = Grid::new(8).unwrap();
        StateBasis::new(&grid, FieldKind::Velocity2d, 1.0).dim()
    }

    #[test]
    fn identity_operator_closed_form() {
        let d = dim_h();
        let op = synthetic_op(DMatrix::identity(d, d));
        let r = 0.1;
        let ri = RightInverse::new(&op, r, d).unwrap();
        let mut rng = stream(820, Domain::Calibration, 0, 0);
        let f = DVector::from_fn(d, |_, _| rng.gen::<f64>() - 0.5);
        let out = ri.apply(&f);
        let want_defect = r / (1.0 + r) * f.norm();
        assert!((out.defect - want_defect).abs() <= 1e-12 * f.norm(), "{}", out.defect);
        let want_zeta = &f / (1.0 + r);
        assert!((&out.zeta - want_zeta).norm() <= 1e-12 * f.norm());
        // Pinned digits: r = 0.1 gives defect 0.090909..|f|.
        assert!((out.defect / f.norm() - 0.0909090909090909).abs() < 1e-12);
    }

    #[test]
    fn diagonal_operator_closed_form_per_component() {
        let d = dim_h();
        let mut a = DMatrix::zeros(d, d);
        let mut rng = stream(821, Domain::Calibration, 0, 0);
        let sigma: Vec<f64> = (0..d).map(|_| 0.3 + rng.gen::<f64>()).collect();
        for i in 0..d {
            a[(i, i)] = sigma[i];
        }
        let op = synthetic_op(a);
        let r = 0.05;
        let ri = RightInverse::new(&op, r, d).unwrap();
        let f = DVector::from_fn(d, |_, _| rng.gen::<f64>() - 0.5);
        let out = ri.apply(&f);
        for i in 0..d {
            let want_z = sigma[i] * f[i] / (sigma[i] * sigma[i] + r);
            assert!((out.zeta[i] - want_z).abs() <= 1e-12, "component {i}");
        }
        let want_defect: f64 = (0..d)
            .map(|i| {
                let e = r * f[i] / (sigma[i] * sigma[i] + r);
                e * e
            })
            .sum::<f64>()
            .sqrt();
        assert!((out.defect - want_defect).abs() <= 1e-12);
    }

    #[test]
    fn zero_input_and_truncation_support() {
        let d = dim_h();
        let op = synthetic_op(DMatrix::identity(d, d));
        let ri = RightInverse::new(&op, 0.2, 5).unwrap();
        let out = ri.apply(&DVector::zeros(d));
        assert_eq!(out.defect, 0.0);
        assert_eq!(out.zeta.norm(), 0.0);
        let f = DVector::from_element(d, 1.0);
        let out = ri.apply(&f);
        for i in 5..d {
            assert_eq!(out.zeta[i], 0.0, "support leak at {i}");
        }
        // The truncated components are simply lost: defect at least their norm.
        assert!(out.defect >= ((d - 5) as f64).sqrt() * (1.0 - 1e-12));
    }

    #[test]
    fn gram_trivial_cases_and_norm_bound() {
        let d = dim_h();
        let zero = synthetic_op(DMatrix::zeros(d, d));
        assert_eq!(build_gram(&zero).norm(), 0.0);
        let mut rng = stream(822, Domain::Calibration, 0, 0);
        let raw = DMatrix::from_fn(d, d, |_, _| rng.gen::<f64>() - 0.5);
        let q = raw.qr().q();
        let op = synthetic_op(q.clone());
        let g = build_gram(&op);
        assert!((g - DMatrix::identity(d, d)).norm() <= 1e-12 * d as f64);
        // |R| <= |U| / r.
        let r = 0.03;
        let ri = RightInverse::new(&op, r, d).unwrap();
        let got = ri.norm_estimate();
        let ubound = q.svd(false, false).singular_values[0] / r;
        assert!(got <= ubound * (1.0 + 1e-9), "norm {got} exceeds bound {ubound}");
    }

    #[test]
    fn exact_inverse_limit_on_full_rank_square() {
        let d = dim_h();
        let mut rng = stream(823, Domain::Calibration, 0, 0);
        let raw = DMatrix::from_fn(d, d, |_, _| rng.gen::<f64>() - 0.5);
        let q = raw.qr().q();
        // Well-conditioned full-rank square operator: Q diag(0.5..2).
        let mut a = q;
        for c in 0..d {
            let s = 0.5 + 1.5 * (c as f64) / (d as f64 - 1.0);
            a.column_mut(c).scale_mut(s);
        }
        let op = synthetic_op(a);
        let ri = RightInverse::new(&op, 1e-10, d).unwrap();
        let f = DVector::from_fn(d, |_, _| rng.gen::<f64>() - 0.5);
        let out = ri.apply(&f);
        assert!(out.defect < 1e-8 * f.norm(), "defect {}", out.defect);
    }

    fn assembled_nse_operator() -> (TangentOperator, Vec<(DVector<f64>, f64)>) {
        let cfg =
            FlowConfig { model: ModelKind::Nse { nu: 0.5 }, grid_n: 8, substeps: 16, index: 1.0 };
        let grid = Grid::new(cfg.grid_n).unwrap();
        let prop = Propagator::new(&grid, cfg).unwrap();
        let basis = Arc::new(StateBasis::new(&grid, FieldKind::Velocity2d, 1.0));
        let nmodes = 6;
        let b: Vec<f64> = (0..nmodes).map(|i| 0.3 * 0.8f64.powi(i as i32)).collect();
        let c: Vec<Vec<f64>> = (0..nmodes).map(|_| vec![1.0, 0.7, 0.5]).collect();
        let spec = NoiseSpec::new(nmodes, 1, b, c, 0.5, false).unwrap();
        let modes = ModeBasis::new(&basis, nmodes).unwrap();
        let mut rng = stream(824, Domain::NoisePath, 0, 0);
        let path = NoisePath::sample(&spec, &mut rng);
        let cells = path.cell_fields(&spec, &modes);
        // A random smooth base state.
        let mut x = DVector::from_fn(basis.dim(), |_, _| rng.gen::<f64>() - 0.5);
        for i in 0..basis.dim() {
            let (k1, k2, _) = basis.entry(i);
            x[i] /= 1.0 + (k1 * k1 + k2 * k2) as f64;
        }
        x *= 0.5 / x.norm();
        let u0 = basis.unflatten(&x);
        let guard = guard_level(&prop, &u0, spec.radius());
        let traj = run_flow(&prop, &u0, &cells, guard, true).unwrap();
        let op = assemble_tangent_operator(&traj, &spec, &modes, &basis).unwrap();
        // Test fields: one-step images of random states (smooth by construction).
        let mut test = Vec::new();
        for t in 0..6 {
            let mut y = DVector::from_fn(basis.dim(), |_, _| rng.gen::<f64>() - 0.5);
            y *= 0.4 / y.norm();
            let v0 = basis.unflatten(&y);
            let img = run_flow(&prop, &v0, &cells, guard, false).unwrap().terminal;
            let coords = basis.flatten(&img);
            let vnorm = img.sobolev_norm(2.0);
            assert!(vnorm > 0.0, "test field {t} degenerate");
            test.push((coords, vnorm));
        }
        (op, test)
    }

    #[test]
    fn assembled_gram_is_psd_and_sweep_is_monotone() {
        let (op, test) = assembled_nse_operator();
        let g = build_gram(&op);
        let eig = g.clone().symmetric_eigen().eigenvalues;
        assert!(eig.iter().all(|l| *l >= -1e-12), "negative eigenvalue {:?}", eig.min());
        let rows =
            sweep(&op, &test, &default_r_lattice(), &default_m_lattice(op.matrix.ncols()))
                .unwrap();
        assert_eq!(rows.len(), 9 * default_m_lattice(op.matrix.ncols()).len());
        assert_eq!(monotonicity_violations(&rows, 1e-9), 0);
        assert!(rows.iter().all(|row| row.operator_norm_estimate.is_finite()));
    }

    #[test]
    fn calibration_picks_smallest_m_then_largest_r() {
        let (op, test) = assembled_nse_operator();
        let rlat = default_r_lattice();
        let mlat = default_m_lattice(op.matrix.ncols());
        let rows = sweep(&op, &test, &rlat, &mlat).unwrap();
        let best = rows.iter().map(|r| r.max_defect_ratio).fold(f64::MAX, f64::min);
        // A generous target: every lattice point at the top is feasible.
        let coarse = rows.iter().map(|r| r.max_defect_ratio).fold(0.0f64, f64::max);
        let (ri, _) = calibrate(&op, &test, coarse * 1.01, &rlat, &mlat).unwrap();
        assert_eq!(ri.m, mlat[0]);
        assert_eq!(ri.r, rlat[0]);
        // A mid target: the chosen point is feasible, no smaller M is.
        let eps = best * 4.0;
        let (ri, rows) = calibrate(&op, &test, eps, &rlat, &mlat).unwrap();
        let chosen_feasible = rows
            .iter()
            .any(|row| row.m == ri.m && row.r == ri.r && row.max_defect_ratio <= eps);
        assert!(chosen_feasible);
        for row in &rows {
            if row.m < ri.m {
                assert!(row.max_defect_ratio > eps, "smaller M was feasible");
            }
            if row.m == ri.m && row.r > ri.r {
                assert!(row.max_defect_ratio > eps, "larger r was feasible");
            }
        }
        // An impossible target reports the achievable minimum.
        let err = calibrate(&op, &test, best * 0.5, &rlat, &mlat).unwrap_err().to_string();
        assert!(err.contains("achievable minimum"), "{err}");
    }
}

