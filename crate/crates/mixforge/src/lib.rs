//! Coupled-trajectory mixing laboratory for randomly forced dissipative PDEs
//! on the 2-torus.
//!
//! The crate evolves discrete-time random dynamics u_k = S(u_{k-1}, eta_k)
//! for two pseudospectral models (2D Navier-Stokes velocity and complex
//! Ginzburg-Landau), drives them with bounded piecewise-Haar noise, and
//! measures exponential mixing by coupling pairs of trajectories:
//!
//! * `haar` builds the noise: Haar time profiles, tent-distributed
//!   coefficients, paths and kicks;
//! * `models` owns the flow maps, dissipativity and energy diagnostics;
//! * `tangent` provides tangent/adjoint solvers and the noise-to-state
//!   response operator;
//! * `inverse` regularizes and calibrates a right inverse of that operator;
//! * `coupling` shifts the second trajectory's noise so the pair's laws
//!   overlap, couples them maximally, and builds the step-shaped distance
//!   used by the decay analysis;
//! * `mixing` runs coupled ensembles, fits decay rates and estimates the
//!   stationary state.

pub mod acceptance;
pub mod config;
pub mod coupling;
pub mod csvio;
pub mod error;
pub mod field;
pub mod grid;
pub mod haar;
pub mod inverse;
pub mod mixing;
pub mod models;
pub mod rng;
pub mod stats;
pub mod tangent;

pub use error::{Error, Result};
