//! Spectral states on the torus and the orthonormal coordinate systems used
//! throughout the crate.
//!
//! Two field kinds exist: real divergence-free velocity fields (two complex
//! coefficient arrays with conjugate symmetry) and complex scalar fields (one
//! array, no symmetry). The state space carries the inhomogeneous Sobolev
//! inner product of exponent `index` (1 for velocity, m for scalars), with
//! norm  ( sum_k (1+|k|^2)^s |uhat_k|^2 )^(1/2)  summed over components.
//!
//! `StateBasis` enumerates an orthonormal basis of the retained (dealiased)
//! modes in that inner product; flattened coordinate vectors are Euclidean,
//! which keeps every Gram matrix diagonal with unit entries. Noise modes are
//! the first `count` elements of the same enumeration, so spatial forcing
//! directions are always a prefix of the state basis.

use std::sync::Arc;

use nalgebra::DVector;
use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum FieldKind {
    /// Real, divergence-free, mean-zero velocity field (two components).
    Velocity2d,
    /// Complex scalar field (one component).
    ComplexScalar,
}

impl FieldKind {
    pub fn ncomp(&self) -> usize {
        match self {
            FieldKind::Velocity2d => 2,
            FieldKind::ComplexScalar => 1,
        }
    }
}

#[derive(Clone)]
pub struct SpectralField {
    pub grid: Arc<Grid>,
    pub kind: FieldKind,
    /// Fourier coefficients per component, FFT index layout.
    pub comps: Vec<Array2<Complex64>>,
}

impl SpectralField {
    pub fn zeros(grid: &Arc<Grid>, kind: FieldKind) -> Self {
        let n = grid.n();
        SpectralField {
            grid: grid.clone(),
            kind,
            comps: (0..kind.ncomp()).map(|_| Array2::zeros((n, n))).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.grid.n()
    }

    /// Sobolev norm ( sum_k (1+|k|^2)^s |uhat_k|^2 )^(1/2) over all components.
    pub fn sobolev_norm(&self, s: f64) -> f64 {
        self.sobolev_inner(self, s).max(0.0).sqrt()
    }

    /// Real Sobolev inner product of exponent `s`.
    pub fn sobolev_inner(&self, other: &SpectralField, s: f64) -> f64 {
        debug_assert_eq!(self.kind, other.kind);
        let n = self.n();
        let mut acc = 0.0;
        for (a, b) in self.comps.iter().zip(&other.comps) {
            for i in 0..n {
                let k1 = self.grid.k_of(i) as f64;
                for j in 0..n {
                    let k2 = self.grid.k_of(j) as f64;
                    let w = (1.0 + k1 * k1 + k2 * k2).powf(s);
                    acc += w * (a[[i, j]] * b[[i, j]].conj()).re;
                }
            }
        }
        acc
    }

    pub fn scale(&mut self, alpha: f64) {
        for c in &mut self.comps {
            c.mapv_inplace(|z| z * alpha);
        }
    }

    /// Multiply every coefficient by (1+|k|^2)^s (the Sobolev weight that
    /// turns an exponent-s inner product into a flat one).
    pub fn sobolev_scale(&mut self, s: f64) {
        let n = self.n();
        for c in &mut self.comps {
            for i in 0..n {
                let k1 = self.grid.k_of(i) as f64;
                for j in 0..n {
                    let k2 = self.grid.k_of(j) as f64;
                    c[[i, j]] *= (1.0 + k1 * k1 + k2 * k2).powf(s);
                }
            }
        }
    }

    /// self += alpha * other
    pub fn axpy(&mut self, alpha: f64, other: &SpectralField) {
        debug_assert_eq!(self.kind, other.kind);
        for (a, b) in self.comps.iter_mut().zip(&other.comps) {
            a.zip_mut_with(b, |x, y| *x += alpha * y);
        }
    }

    pub fn sub(&self, other: &SpectralField) -> SpectralField {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    /// Zero every mode outside the 2/3-rule radius.
    pub fn dealias(&mut self) {
        let n = self.n();
        for c in &mut self.comps {
            for i in 0..n {
                let k1 = self.grid.k_of(i);
                for j in 0..n {
                    let k2 = self.grid.k_of(j);
                    if !self.grid.retained(k1, k2) {
                        c[[i, j]] = Complex64::default();
                    }
                }
            }
        }
    }

    /// Leray projection onto divergence-free, mean-zero fields
    /// (velocity kind only): uhat_k <- uhat_k - k (k . uhat_k)/|k|^2.
    pub fn leray_project(&mut self) {
        assert_eq!(self.kind, FieldKind::Velocity2d);
        let n = self.n();
        for i in 0..n {
            let k1 = self.grid.k_of(i) as f64;
            for j in 0..n {
                let k2 = self.grid.k_of(j) as f64;
                let ksq = k1 * k1 + k2 * k2;
                if ksq == 0.0 {
                    self.comps[0][[i, j]] = Complex64::default();
                    self.comps[1][[i, j]] = Complex64::default();
                } else {
                    let dot = k1 * self.comps[0][[i, j]] + k2 * self.comps[1][[i, j]];
                    self.comps[0][[i, j]] -= k1 * dot / ksq;
                    self.comps[1][[i, j]] -= k2 * dot / ksq;
                }
            }
        }
    }

    /// Largest |k . uhat_k| over retained modes; zero for divergence-free states.
    pub fn divergence_sup(&self) -> f64 {
        assert_eq!(self.kind, FieldKind::Velocity2d);
        let n = self.n();
        let mut sup = 0.0f64;
        for i in 0..n {
            let k1 = self.grid.k_of(i) as f64;
            for j in 0..n {
                let k2 = self.grid.k_of(j) as f64;
                let dot = k1 * self.comps[0][[i, j]] + k2 * self.comps[1][[i, j]];
                sup = sup.max(dot.norm());
            }
        }
        sup
    }

    /// Enforce conjugate symmetry uhat_{-k} = conj(uhat_k) (real fields).
    pub fn symmetrize_real(&mut self) {
        let n = self.n();
        for c in &mut self.comps {
            for i in 0..n {
                for j in 0..n {
                    let ni = (n - i) % n;
                    let nj = (n - j) % n;
                    if (i, j) <= (ni, nj) {
                        let avg = 0.5 * (c[[i, j]] + c[[ni, nj]].conj());
                        c[[i, j]] = avg;
                        c[[ni, nj]] = avg.conj();
                    }
                }
            }
        }
    }

    /// Physical samples of every component (inverse transform of a copy).
    pub fn to_physical(&self) -> Vec<Array2<Complex64>> {
        self.comps
            .iter()
            .map(|c| {
                let mut p = c.clone();
                self.grid.to_physical(&mut p);
                p
            })
            .collect()
    }

    /// Build a field from physical samples (forward transform of a copy).
    pub fn from_physical(
        grid: &Arc<Grid>,
        kind: FieldKind,
        phys: &[Array2<Complex64>],
    ) -> SpectralField {
        assert_eq!(phys.len(), kind.ncomp());
        let comps = phys
            .iter()
            .map(|p| {
                let mut c = p.clone();
                grid.to_spectral(&mut c);
                c
            })
            .collect();
        SpectralField { grid: grid.clone(), kind, comps }
    }

    /// Partial derivative d/dx_axis as a new coefficient array of component `c`.
    pub fn derivative(&self, comp: usize, axis: usize) -> Array2<Complex64> {
        let n = self.n();
        let mut out = self.comps[comp].clone();
        for i in 0..n {
            let k1 = self.grid.k_of(i) as f64;
            for j in 0..n {
                let k2 = self.grid.k_of(j) as f64;
                let k = if axis == 0 { k1 } else { k2 };
                out[[i, j]] *= Complex64::new(0.0, k);
            }
        }
        out
    }
}

/// One real degree of freedom of the state basis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatePart {
    /// cos(k.x) sweep of the divergence-free direction k_perp/|k|.
    VelCos,
    /// sin(k.x) sweep of the divergence-free direction k_perp/|k|.
    VelSin,
    /// Real part of the scalar coefficient at k.
    ScalRe,
    /// Imaginary part of the scalar coefficient at k.
    ScalIm,
}

/// Orthonormal basis of the retained modes in the Sobolev inner product of
/// exponent `index`. Modes are sorted by (|k|^2, k1, k2); velocity uses the
/// half-lattice k2 > 0 or (k2 = 0, k1 > 0), scalars the full lattice
/// including k = 0. Flattened coordinates are Euclidean in this basis.
pub struct StateBasis {
    pub grid: Arc<Grid>,
    pub kind: FieldKind,
    pub index: f64,
    entries: Vec<(i32, i32, StatePart)>,
}

impl StateBasis {
    pub fn new(grid: &Arc<Grid>, kind: FieldKind, index: f64) -> StateBasis {
        let kmax = grid.kmax();
        let mut ks: Vec<(i32, i32)> = Vec::new();
        for k1 in -kmax..=kmax {
            for k2 in -kmax..=kmax {
                let keep = match kind {
                    FieldKind::Velocity2d => k2 > 0 || (k2 == 0 && k1 > 0),
                    FieldKind::ComplexScalar => true,
                };
                if keep {
                    ks.push((k1, k2));
                }
            }
        }
        ks.sort_by_key(|&(k1, k2)| (k1 * k1 + k2 * k2, k1, k2));
        let mut entries = Vec::with_capacity(2 * ks.len());
        for (k1, k2) in ks {
            match kind {
                FieldKind::Velocity2d => {
                    entries.push((k1, k2, StatePart::VelCos));
                    entries.push((k1, k2, StatePart::VelSin));
                }
                FieldKind::ComplexScalar => {
                    entries.push((k1, k2, StatePart::ScalRe));
                    entries.push((k1, k2, StatePart::ScalIm));
                }
            }
        }
        StateBasis { grid: grid.clone(), kind, index, entries }
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn entry(&self, i: usize) -> (i32, i32, StatePart) {
        self.entries[i]
    }

    /// Orthonormal coordinates of a (dealiased) field.
    pub fn flatten(&self, u: &SpectralField) -> DVector<f64> {
        debug_assert_eq!(u.kind, self.kind);
        let mut x = DVector::zeros(self.dim());
        for (row, &(k1, k2, part)) in self.entries.iter().enumerate() {
            let i = self.grid.idx_of(k1);
            let j = self.grid.idx_of(k2);
            let ksq = (k1 * k1 + k2 * k2) as f64;
            match part {
                StatePart::VelCos | StatePart::VelSin => {
                    let norm = ksq.sqrt();
                    let (v1, v2) = (-k2 as f64 / norm, k1 as f64 / norm);
                    let psi = u.comps[0][[i, j]] * v1 + u.comps[1][[i, j]] * v2;
                    let alpha = (2.0 / (1.0 + ksq).powf(self.index)).sqrt();
                    x[row] = match part {
                        StatePart::VelCos => 2.0 * psi.re / alpha,
                        _ => -2.0 * psi.im / alpha,
                    };
                }
                StatePart::ScalRe | StatePart::ScalIm => {
                    let tau = (1.0 + ksq).powf(-self.index / 2.0);
                    let z = u.comps[0][[i, j]];
                    x[row] = match part {
                        StatePart::ScalRe => z.re / tau,
                        _ => z.im / tau,
                    };
                }
            }
        }
        x
    }

    /// Inverse of `flatten`.
    pub fn unflatten(&self, x: &DVector<f64>) -> SpectralField {
        assert_eq!(x.len(), self.dim());
        let mut u = SpectralField::zeros(&self.grid, self.kind);
        for (row, &(k1, k2, part)) in self.entries.iter().enumerate() {
            let a = x[row];
            if a == 0.0 {
                continue;
            }
            let i = self.grid.idx_of(k1);
            let j = self.grid.idx_of(k2);
            let ksq = (k1 * k1 + k2 * k2) as f64;
            match part {
                StatePart::VelCos | StatePart::VelSin => {
                    let norm = ksq.sqrt();
                    let (v1, v2) = (-k2 as f64 / norm, k1 as f64 / norm);
                    let alpha = (2.0 / (1.0 + ksq).powf(self.index)).sqrt();
                    let psi = match part {
                        StatePart::VelCos => Complex64::new(a * alpha / 2.0, 0.0),
                        _ => Complex64::new(0.0, -a * alpha / 2.0),
                    };
                    let ni = self.grid.idx_of(-k1);
                    let nj = self.grid.idx_of(-k2);
                    u.comps[0][[i, j]] += psi * v1;
                    u.comps[1][[i, j]] += psi * v2;
                    u.comps[0][[ni, nj]] += psi.conj() * v1;
                    u.comps[1][[ni, nj]] += psi.conj() * v2;
                }
                StatePart::ScalRe | StatePart::ScalIm => {
                    let tau = (1.0 + ksq).powf(-self.index / 2.0);
                    let z = match part {
                        StatePart::ScalRe => Complex64::new(a * tau, 0.0),
                        _ => Complex64::new(0.0, a * tau),
                    };
                    u.comps[0][[i, j]] += z;
                }
            }
        }
        u
    }

    /// The `i`-th orthonormal basis field.
    pub fn basis_field(&self, i: usize) -> SpectralField {
        let mut x = DVector::zeros(self.dim());
        x[i] = 1.0;
        self.unflatten(&x)
    }
}

/// Spatial noise directions: the first `count` elements of a `StateBasis`.
#[derive(Clone)]
pub struct ModeBasis {
    pub basis: Arc<StateBasis>,
    fields: Vec<SpectralField>,
}

impl ModeBasis {
    pub fn new(basis: &Arc<StateBasis>, count: usize) -> Result<ModeBasis> {
        if count == 0 || count > basis.dim() {
            return Err(Error::Validation(format!(
                "spatial mode count {count} outside 1..={}",
                basis.dim()
            )));
        }
        let fields = (0..count).map(|i| basis.basis_field(i)).collect();
        Ok(ModeBasis { basis: basis.clone(), fields })
    }

    /// Spatial directions from an explicit selection of state-basis entries
    /// (e.g. a dynamically invariant subfamily).
    pub fn from_entries(basis: &Arc<StateBasis>, entries: &[usize]) -> Result<ModeBasis> {
        if entries.is_empty() {
            return Err(Error::Validation("noise needs at least one spatial mode".into()));
        }
        if let Some(&bad) = entries.iter().find(|&&i| i >= basis.dim()) {
            return Err(Error::Validation(format!(
                "state-basis entry {bad} outside 0..{}",
                basis.dim()
            )));
        }
        let fields = entries.iter().map(|&i| basis.basis_field(i)).collect();
        Ok(ModeBasis { basis: basis.clone(), fields })
    }

    pub fn count(&self) -> usize {
        self.fields.len()
    }

    pub fn field(&self, i: usize) -> &SpectralField {
        &self.fields[i]
    }
}
