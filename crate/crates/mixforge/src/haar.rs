//! Bounded noise built from Haar time profiles and tent-distributed
//! coefficients.
//!
//! A path on the unit time interval is
//!     eta_t = sum_i b_i ( sum_{lv,l} c_i[lv] xi_{i,lv,l} h_{lv,l}(t) ) phi_i,
//! where phi_i are the first I spatial modes of the state basis, h are the
//! Haar functions (level -1 is the scaling function, levels 0..=J the
//! wavelets) and every coefficient xi is drawn from the tent density on
//! [-1, 1]. Paths are piecewise constant on the 2^(J+1) dyadic cells, which
//! lets the flow integrate them exactly when substeps align with the cells.
//!
//! Coefficients are stored in the canonical order (level asc, mode asc,
//! shift asc), so a prefix of the coordinate vector spans the coarsest time
//! profiles across all spatial modes. Truncating to the first M coordinates
//! always means truncating in that order. CSV files sort rows by
//! (mode, level, shift) instead; readers restore the canonical layout.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::field::{ModeBasis, SpectralField};

/// Haar function value h_{level,shift}(t) on [0, 1); 0 outside.
///
/// Level -1 is the scaling function (constant 1, shift must be 0); level
/// j >= 0 holds 2^j wavelets of height 2^(j/2).
pub fn haar_eval(level: i32, shift: usize, t: f64) -> Result<f64> {
    if level < -1 {
        return Err(Error::Validation(format!("haar level must be >= -1, got {level}")));
    }
    let nshift = shifts_at(level);
    if shift >= nshift {
        return Err(Error::Validation(format!(
            "haar shift {shift} out of range 0..{nshift} at level {level}"
        )));
    }
    if !(0.0..1.0).contains(&t) {
        return Ok(0.0);
    }
    if level == -1 {
        return Ok(1.0);
    }
    let scale = (1u64 << level) as f64; // 2^j
    let lo = shift as f64 / scale;
    let mid = (shift as f64 + 0.5) / scale;
    let hi = (shift as f64 + 1.0) / scale;
    let height = scale.sqrt();
    if t >= lo && t < mid {
        Ok(height)
    } else if t >= mid && t < hi {
        Ok(-height)
    } else {
        Ok(0.0)
    }
}

/// Number of shifts at a level: 1 for the scaling function, 2^j for wavelets.
pub fn shifts_at(level: i32) -> usize {
    if level <= 0 {
        1
    } else {
        1usize << level
    }
}

/// Weight of a level in the noise-radius sum: 1 for the scaling function,
/// 2^j for wavelet level j.
pub fn level_weight(level: i32) -> f64 {
    if level == -1 {
        1.0
    } else {
        (1u64 << level) as f64
    }
}

/// Symmetric tent density rho(x) = (1 - s|x|)/(2 - s) on [-1, 1].
///
/// The slope parameter s lies in [0, 1); s = 0 is the uniform density. The
/// density is Lipschitz with constant s/(2-s) and rho(0) = 1/(2-s) > 0.
#[derive(Clone, Copy, Debug)]
pub struct TentDensity {
    s: f64,
}

impl TentDensity {
    pub fn new(s: f64) -> Result<TentDensity> {
        if !(0.0..1.0).contains(&s) {
            return Err(Error::Validation(format!("tent slope must lie in [0, 1), got {s}")));
        }
        Ok(TentDensity { s })
    }

    pub fn slope(&self) -> f64 {
        self.s
    }

    fn z(&self) -> f64 {
        2.0 - self.s
    }

    pub fn pdf(&self, x: f64) -> f64 {
        if !(-1.0..=1.0).contains(&x) {
            return 0.0;
        }
        (1.0 - self.s * x.abs()) / self.z()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= -1.0 {
            0.0
        } else if x >= 1.0 {
            1.0
        } else if x <= 0.0 {
            (x + 0.5 * self.s * x * x + 1.0 - 0.5 * self.s) / self.z()
        } else {
            1.0 - self.cdf(-x)
        }
    }

    /// Exact inverse-CDF sample.
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let u: f64 = rng.gen();
        self.inverse_cdf(u)
    }

    pub fn inverse_cdf(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        if u > 0.5 {
            return -self.inverse_cdf(1.0 - u);
        }
        if self.s == 0.0 {
            return 2.0 * u - 1.0;
        }
        // Negative branch: solve s x^2/2 + x + (1 - s/2 - u Z) = 0 for x in [-1, 0].
        let disc = (1.0 - self.s).powi(2) + 2.0 * self.s * u * self.z();
        ((-1.0) + disc.sqrt()) / self.s
    }
}

/// Static description of the truncated noise: spatial mode count I, finest
/// wavelet level J, amplitudes b_i, per-level weights c_i[lv] (index 0 is
/// the scaling level), tent slope, and whether the force acts as kicks.
#[derive(Clone, Debug)]
pub struct NoiseSpec {
    pub spatial_modes: usize,
    pub level_max: i32,
    pub b: Vec<f64>,
    pub c: Vec<Vec<f64>>,
    pub density: TentDensity,
    pub kick_mode: bool,
}

/// Address of one noise coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CoeffIndex {
    pub mode: usize,
    pub level: i32,
    pub shift: usize,
}

impl NoiseSpec {
    pub fn new(
        spatial_modes: usize,
        level_max: i32,
        b: Vec<f64>,
        c: Vec<Vec<f64>>,
        density_slope: f64,
        kick_mode: bool,
    ) -> Result<NoiseSpec> {
        if spatial_modes == 0 {
            return Err(Error::Validation("noise needs at least one spatial mode".into()));
        }
        if level_max < -1 {
            return Err(Error::Validation(format!(
                "finest haar level must be >= -1, got {level_max}"
            )));
        }
        if b.len() != spatial_modes || c.len() != spatial_modes {
            return Err(Error::Validation(format!(
                "amplitude tables must have {spatial_modes} rows (got b: {}, c: {})",
                b.len(),
                c.len()
            )));
        }
        let nlevels = (level_max + 2) as usize;
        for (i, bi) in b.iter().enumerate() {
            if !(*bi > 0.0) {
                return Err(Error::Validation(format!("amplitude b[{i}] must be positive")));
            }
            if i > 0 && b[i] > b[i - 1] {
                return Err(Error::Validation("amplitudes b must be non-increasing".into()));
            }
        }
        for (i, ci) in c.iter().enumerate() {
            if ci.len() != nlevels {
                return Err(Error::Validation(format!(
                    "level weights c[{i}] must have {nlevels} entries, got {}",
                    ci.len()
                )));
            }
            if ci.iter().any(|x| !(*x > 0.0)) {
                return Err(Error::Validation(format!(
                    "level weights c[{i}] must be strictly positive"
                )));
            }
        }
        let density = TentDensity::new(density_slope)?;
        Ok(NoiseSpec { spatial_modes, level_max, b, c, density, kick_mode })
    }

    /// Number of dyadic time cells a path is constant on.
    pub fn cells(&self) -> usize {
        1usize << (self.level_max + 1)
    }

    /// Total number of coefficients I * 2^(J+1).
    pub fn dim(&self) -> usize {
        self.spatial_modes * self.cells()
    }

    /// Canonical coefficient order: level asc, mode asc, shift asc.
    pub fn coeff_indices(&self) -> Vec<CoeffIndex> {
        let mut out = Vec::with_capacity(self.dim());
        for level in -1..=self.level_max {
            for mode in 0..self.spatial_modes {
                for shift in 0..shifts_at(level) {
                    out.push(CoeffIndex { mode, level, shift });
                }
            }
        }
        out
    }

    /// Amplitude multiplying coefficient (mode, level): b_i * c_i[lv].
    pub fn amplitude(&self, mode: usize, level: i32) -> f64 {
        self.b[mode] * self.c[mode][(level + 1) as usize]
    }

    /// Noise radius: R^2 = sum_i b_i^2 sum_lv w(lv) c_i[lv]^2 with w the
    /// level weight. Summation order is modes ascending, levels ascending;
    /// tests reproduce the sum in exactly this order.
    pub fn radius(&self) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.spatial_modes {
            let mut inner = 0.0;
            for level in -1..=self.level_max {
                let c = self.c[i][(level + 1) as usize];
                inner += level_weight(level) * c * c;
            }
            acc += self.b[i] * self.b[i] * inner;
        }
        acc.sqrt()
    }
}

/// One realization of the coefficient vector, canonical order.
#[derive(Clone, Debug)]
pub struct NoisePath {
    pub xi: Vec<f64>,
}

impl NoisePath {
    pub fn zero(spec: &NoiseSpec) -> NoisePath {
        NoisePath { xi: vec![0.0; spec.dim()] }
    }

    pub fn sample(spec: &NoiseSpec, rng: &mut impl Rng) -> NoisePath {
        let xi = (0..spec.dim()).map(|_| spec.density.sample(rng)).collect();
        NoisePath { xi }
    }

    /// True when every coefficient lies in [-1, 1] (exact comparison).
    pub fn in_brick(&self) -> bool {
        self.xi.iter().all(|x| (-1.0..=1.0).contains(x))
    }

    /// Per-mode profile values theta_i on each dyadic cell (I x cells).
    pub fn theta_table(&self, spec: &NoiseSpec) -> Array2<f64> {
        let cells = spec.cells();
        let mut table = Array2::zeros((spec.spatial_modes, cells));
        for (idx, ci) in spec.coeff_indices().into_iter().enumerate() {
            let xi = self.xi[idx];
            if xi == 0.0 {
                continue;
            }
            let c = spec.c[ci.mode][(ci.level + 1) as usize];
            if ci.level == -1 {
                for m in 0..cells {
                    table[[ci.mode, m]] += c * xi;
                }
            } else {
                let span = cells >> ci.level; // cells covered by this wavelet
                let start = ci.shift * span;
                let height = ((1u64 << ci.level) as f64).sqrt();
                for m in start..start + span / 2 {
                    table[[ci.mode, m]] += c * xi * height;
                }
                for m in start + span / 2..start + span {
                    table[[ci.mode, m]] -= c * xi * height;
                }
            }
        }
        table
    }

    /// Dyadic cell containing time t in [0, 1).
    pub fn cell_of(spec: &NoiseSpec, t: f64) -> usize {
        ((t * spec.cells() as f64) as usize).min(spec.cells() - 1)
    }

    /// Noise value eta_t as a spectral field.
    pub fn eval(&self, spec: &NoiseSpec, basis: &ModeBasis, t: f64) -> SpectralField {
        let fields = self.cell_fields(spec, basis);
        fields[Self::cell_of(spec, t)].clone()
    }

    /// The path's constant field on every dyadic cell.
    pub fn cell_fields(&self, spec: &NoiseSpec, basis: &ModeBasis) -> Vec<SpectralField> {
        assert!(basis.count() >= spec.spatial_modes, "mode basis too small for noise spec");
        let table = self.theta_table(spec);
        let cells = spec.cells();
        let mut out = Vec::with_capacity(cells);
        for m in 0..cells {
            let mut f = SpectralField::zeros(&basis.basis.grid, basis.basis.kind);
            for i in 0..spec.spatial_modes {
                let w = spec.b[i] * table[[i, m]];
                if w != 0.0 {
                    f.axpy(w, basis.field(i));
                }
            }
            out.push(f);
        }
        out
    }

    /// Exact time integral of the squared state norm of the path,
    /// int_0^1 |eta_t|_H^2 dt = sum (b_i c_i[lv] xi)^2.
    pub fn integral_norm_sq(&self, spec: &NoiseSpec) -> f64 {
        spec.coeff_indices()
            .into_iter()
            .zip(&self.xi)
            .map(|(ci, xi)| {
                let a = spec.amplitude(ci.mode, ci.level) * xi;
                a * a
            })
            .sum()
    }
}

/// One impulsive kick eta = sum_i b_i xi_i phi_i (kick-mode forcing).
pub fn kick_sample(spec: &NoiseSpec, basis: &ModeBasis, rng: &mut impl Rng) -> SpectralField {
    assert!(basis.count() >= spec.spatial_modes);
    let mut f = SpectralField::zeros(&basis.basis.grid, basis.basis.kind);
    for i in 0..spec.spatial_modes {
        let xi = spec.density.sample(rng);
        f.axpy(spec.b[i] * xi, basis.field(i));
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{FieldKind, StateBasis};
    use crate::grid::Grid;
    use crate::rng::{stream, Domain};
    use crate::stats::{ks_statistic, ks_threshold};
    use std::sync::Arc;

    fn test_spec(modes: usize, level_max: i32) -> NoiseSpec {
        let b: Vec<f64> = (0..modes).map(|i| 0.5 / (1.0 + i as f64)).collect();
        let c: Vec<Vec<f64>> = (0..modes)
            .map(|_| (0..(level_max + 2) as usize).map(|l| 0.8f64.powi(l as i32)).collect())
            .collect();
        NoiseSpec::new(modes, level_max, b, c, 0.5, false).unwrap()
    }

    #[test]
    fn haar_values_match_branch_table() {
        // Scaling function is 1 everywhere on [0,1).
        assert_eq!(haar_eval(-1, 0, 0.0).unwrap(), 1.0);
        assert_eq!(haar_eval(-1, 0, 0.999).unwrap(), 1.0);
        assert_eq!(haar_eval(-1, 0, 1.0).unwrap(), 0.0);
        // Level-1 wavelet, shift 1: +sqrt(2) on [0.5, 0.75), -sqrt(2) on [0.75, 1).
        let r = 2.0f64.sqrt();
        assert_eq!(haar_eval(1, 1, 0.55).unwrap(), r);
        assert_eq!(haar_eval(1, 1, 0.80).unwrap(), -r);
        assert_eq!(haar_eval(1, 1, 0.30).unwrap(), 0.0);
        // Level 0 wavelet flips sign at 1/2 with height 1.
        assert_eq!(haar_eval(0, 0, 0.25).unwrap(), 1.0);
        assert_eq!(haar_eval(0, 0, 0.75).unwrap(), -1.0);
    }

    #[test]
    fn haar_rejects_bad_indices() {
        assert!(haar_eval(-2, 0, 0.5).is_err());
        assert!(haar_eval(1, 2, 0.5).is_err());
        assert!(haar_eval(-1, 1, 0.5).is_err());
    }

    #[test]
    fn haar_family_is_orthonormal() {
        // Exact dyadic quadrature: all functions are constant on cells of
        // width 2^-(J+1).
        let jmax = 3i32;
        let cells = 1usize << (jmax + 1);
        let mut family: Vec<(i32, usize)> = vec![(-1, 0)];
        for j in 0..=jmax {
            for l in 0..shifts_at(j) {
                family.push((j, l));
            }
        }
        assert_eq!(family.len(), 1 << (jmax + 1));
        for (a, &(la, sa)) in family.iter().enumerate() {
            for &(lb, sb) in family.iter().skip(a) {
                let mut acc = 0.0;
                for m in 0..cells {
                    let t = (m as f64 + 0.5) / cells as f64;
                    acc += haar_eval(la, sa, t).unwrap() * haar_eval(lb, sb, t).unwrap();
                }
                acc /= cells as f64;
                let want = if (la, sa) == (lb, sb) { 1.0 } else { 0.0 };
                assert!((acc - want).abs() < 1e-12, "({la},{sa}) vs ({lb},{sb}): {acc}");
            }
        }
    }

    #[test]
    fn tent_density_values() {
        let tent = TentDensity::new(0.5).unwrap();
        assert_eq!(tent.pdf(0.0), 1.0 / 1.5);
        assert!((tent.pdf(0.0) - 0.6666666666666666).abs() < 1e-16);
        assert_eq!(tent.pdf(1.5), 0.0);
        assert!((tent.cdf(0.0) - 0.5).abs() < 1e-15);
        assert_eq!(tent.cdf(-1.0), 0.0);
        assert_eq!(tent.cdf(1.0), 1.0);
        assert!(TentDensity::new(1.0).is_err());
        assert!(TentDensity::new(-0.1).is_err());
    }

    #[test]
    fn tent_inverse_cdf_round_trips() {
        let tent = TentDensity::new(0.5).unwrap();
        for i in 0..=1000 {
            let u = i as f64 / 1000.0;
            let x = tent.inverse_cdf(u);
            assert!((-1.0..=1.0).contains(&x));
            assert!((tent.cdf(x) - u).abs() < 1e-12, "u = {u}");
        }
    }

    #[test]
    fn tent_samples_pass_ks_at_one_percent() {
        let tent = TentDensity::new(0.5).unwrap();
        let mut rng = stream(11, Domain::NoisePath, 0, 0);
        let xs: Vec<f64> = (0..100_000).map(|_| tent.sample(&mut rng)).collect();
        let d = ks_statistic(&xs, |x| tent.cdf(x));
        assert!(d < ks_threshold(xs.len(), 0.01), "KS statistic {d}");
    }

    #[test]
    fn spec_validation_rejects_bad_tables() {
        assert!(NoiseSpec::new(0, 1, vec![], vec![], 0.5, false).is_err());
        // Increasing amplitudes rejected.
        assert!(NoiseSpec::new(
            2,
            -1,
            vec![0.1, 0.2],
            vec![vec![1.0], vec![1.0]],
            0.5,
            false
        )
        .is_err());
        // Zero level weight rejected.
        assert!(NoiseSpec::new(1, 0, vec![0.1], vec![vec![1.0, 0.0]], 0.5, false).is_err());
        // Wrong level-table width rejected.
        assert!(NoiseSpec::new(1, 1, vec![0.1], vec![vec![1.0, 1.0]], 0.5, false).is_err());
    }

    #[test]
    fn radius_matches_direct_sum_exactly() {
        let spec = test_spec(3, 2);
        let mut direct = 0.0;
        for i in 0..3 {
            let mut inner = 0.0;
            for level in -1..=2 {
                let c = spec.c[i][(level + 1) as usize];
                inner += level_weight(level) * c * c;
            }
            direct += spec.b[i] * spec.b[i] * inner;
        }
        assert_eq!(spec.radius(), direct.sqrt());
    }

    #[test]
    fn sampled_paths_stay_in_brick() {
        let spec = test_spec(4, 2);
        let mut rng = stream(12, Domain::NoisePath, 0, 0);
        for _ in 0..50 {
            let path = NoisePath::sample(&spec, &mut rng);
            assert!(path.in_brick());
            assert_eq!(path.xi.len(), spec.dim());
        }
        let mut shifted = NoisePath::zero(&spec);
        shifted.xi[3] = 1.0000001;
        assert!(!shifted.in_brick());
    }

    #[test]
    fn path_parseval_identity() {
        let grid = Grid::new(32).unwrap();
        let basis = Arc::new(StateBasis::new(&grid, FieldKind::Velocity2d, 1.0));
        let spec = test_spec(4, 2);
        let modes = ModeBasis::new(&basis, spec.spatial_modes).unwrap();
        let mut rng = stream(13, Domain::NoisePath, 0, 0);
        let path = NoisePath::sample(&spec, &mut rng);
        // Quadrature of |eta_t|^2 over the dyadic cells (exact for piecewise
        // constant paths) against the coefficient-space sum.
        let fields = path.cell_fields(&spec, &modes);
        let quad: f64 = fields.iter().map(|f| {
            let n = f.sobolev_norm(1.0);
            n * n / fields.len() as f64
        }).sum();
        let coeff = path.integral_norm_sq(&spec);
        assert!((quad - coeff).abs() < 1e-10 * coeff.max(1.0), "quad {quad} vs coeff {coeff}");
    }

    #[test]
    fn eval_is_piecewise_constant() {
        let grid = Grid::new(32).unwrap();
        let basis = Arc::new(StateBasis::new(&grid, FieldKind::Velocity2d, 1.0));
        let spec = test_spec(2, 1);
        let modes = ModeBasis::new(&basis, spec.spatial_modes).unwrap();
        let mut rng = stream(14, Domain::NoisePath, 0, 0);
        let path = NoisePath::sample(&spec, &mut rng);
        // Cells have width 1/4: 0.30 and 0.45 share cell 1, 0.55 does not.
        let a = path.eval(&spec, &modes, 0.30);
        let b = path.eval(&spec, &modes, 0.45);
        let c = path.eval(&spec, &modes, 0.55);
        assert_eq!(a.sub(&b).sobolev_norm(1.0), 0.0);
        assert!(a.sub(&c).sobolev_norm(1.0) > 0.0);
    }

    #[test]
    fn canonical_order_puts_scaling_block_first() {
        let spec = test_spec(3, 1);
        let idx = spec.coeff_indices();
        assert_eq!(idx.len(), 3 * 4);
        for (pos, ci) in idx.iter().take(3).enumerate() {
            assert_eq!(ci.level, -1);
            assert_eq!(ci.mode, pos);
        }
        assert!(idx[3].level == 0);
    }

    #[test]
    fn kick_norm_is_bounded_by_amplitude_sum() {
        let grid = Grid::new(32).unwrap();
        let basis = Arc::new(StateBasis::new(&grid, FieldKind::Velocity2d, 1.0));
        let spec = test_spec(4, 0);
        let modes = ModeBasis::new(&basis, spec.spatial_modes).unwrap();
        let mut rng = stream(15, Domain::NoisePath, 0, 0);
        let bound: f64 = spec.b.iter().sum();
        for _ in 0..20 {
            let kick = kick_sample(&spec, &modes, &mut rng);
            assert!(kick.sobolev_norm(1.0) <= bound + 1e-12);
        }
    }
}
