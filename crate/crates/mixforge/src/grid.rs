//! Square spectral grid on the torus [0, 2*pi)^2 with cached FFT plans.
//!
//! Coefficients use the standard FFT layout: array index i holds wavenumber
//! k = i for i <= N/2 - 1 and k = i - N otherwise. The forward transform
//! divides by N^2, so u(x) = sum_k uhat_k exp(i k.x) holds exactly and the
//! coefficient of exp(i k.x) is uhat_k itself.

use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::error::{Error, Result};

pub struct Grid {
    n: usize,
    kmax: i32,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Grid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Grid").field("n", &self.n).field("kmax", &self.kmax).finish()
    }
}

impl Grid {
    /// Grid of size `n` x `n`; `n` must be a power of two, at least 8.
    /// The dealias radius is floor(n/3) (2/3 rule).
    pub fn new(n: usize) -> Result<Arc<Grid>> {
        if !n.is_power_of_two() || n < 8 {
            return Err(Error::Validation(format!(
                "grid size must be a power of two >= 8, got {n}"
            )));
        }
        let mut planner = FftPlanner::new();
        Ok(Arc::new(Grid {
            n,
            kmax: (n / 3) as i32,
            fwd: planner.plan_fft(n, FftDirection::Forward),
            inv: planner.plan_fft(n, FftDirection::Inverse),
        }))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Largest retained wavenumber component after dealiasing.
    pub fn kmax(&self) -> i32 {
        self.kmax
    }

    /// Wavenumber held at array index `i`.
    pub fn k_of(&self, i: usize) -> i32 {
        let half = (self.n / 2) as i32;
        let i = i as i32;
        if i < half {
            i
        } else {
            i - self.n as i32
        }
    }

    /// Array index holding wavenumber `k` (|k| <= n/2).
    pub fn idx_of(&self, k: i32) -> usize {
        debug_assert!(k.unsigned_abs() as usize <= self.n / 2);
        k.rem_euclid(self.n as i32) as usize
    }

    /// True if the mode survives the 2/3-rule mask.
    pub fn retained(&self, k1: i32, k2: i32) -> bool {
        k1.abs() <= self.kmax && k2.abs() <= self.kmax
    }

    fn transform(&self, a: &mut Array2<Complex64>, fft: &Arc<dyn Fft<f64>>) {
        let n = self.n;
        debug_assert_eq!(a.dim(), (n, n));
        // Rows are contiguous in the default layout.
        for mut row in a.rows_mut() {
            fft.process(row.as_slice_mut().expect("contiguous row"));
        }
        let mut col = vec![Complex64::default(); n];
        for j in 0..n {
            for i in 0..n {
                col[i] = a[[i, j]];
            }
            fft.process(&mut col);
            for i in 0..n {
                a[[i, j]] = col[i];
            }
        }
    }

    /// Physical samples -> Fourier coefficients (in place).
    pub fn to_spectral(&self, a: &mut Array2<Complex64>) {
        self.transform(a, &self.fwd);
        let scale = 1.0 / (self.n * self.n) as f64;
        a.mapv_inplace(|z| z * scale);
    }

    /// Fourier coefficients -> physical samples (in place).
    pub fn to_physical(&self, a: &mut Array2<Complex64>) {
        self.transform(a, &self.inv);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn rejects_bad_sizes() {
        assert!(Grid::new(12).is_err());
        assert!(Grid::new(4).is_err());
        assert!(Grid::new(32).is_ok());
    }

    #[test]
    fn wavenumber_layout_round_trips() {
        let g = Grid::new(16).unwrap();
        for i in 0..16 {
            let k = g.k_of(i);
            assert_eq!(g.idx_of(k), i);
        }
        assert_eq!(g.k_of(0), 0);
        assert_eq!(g.k_of(7), 7);
        assert_eq!(g.k_of(8), -8);
        assert_eq!(g.k_of(15), -1);
    }

    #[test]
    fn pure_mode_has_unit_coefficient() {
        let g = Grid::new(16).unwrap();
        let n = g.n();
        let (k1, k2) = (3i32, -2i32);
        let mut a = Array2::<Complex64>::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                let x = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                let y = 2.0 * std::f64::consts::PI * j as f64 / n as f64;
                a[[i, j]] = (Complex64::new(0.0, k1 as f64 * x + k2 as f64 * y)).exp();
            }
        }
        g.to_spectral(&mut a);
        for i in 0..n {
            for j in 0..n {
                let want = if (g.k_of(i), g.k_of(j)) == (k1, k2) { 1.0 } else { 0.0 };
                assert!((a[[i, j]] - want).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn spectral_physical_round_trip() {
        let g = Grid::new(32).unwrap();
        let n = g.n();
        let mut a = Array2::<Complex64>::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                a[[i, j]] = Complex64::new((i * 31 + j * 17) as f64 % 7.0, (i + 2 * j) as f64 % 5.0);
            }
        }
        let orig = a.clone();
        g.to_spectral(&mut a);
        g.to_physical(&mut a);
        let err = (&a - &orig).iter().map(|z| z.norm()).fold(0.0f64, f64::max);
        assert!(err < 1e-12, "round trip error {err}");
    }
}
