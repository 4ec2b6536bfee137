use thiserror::Error;

/// Crate-wide error type. Validation failures map to CLI exit code 1,
/// numerical guard trips to exit code 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config parse error at line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("blow-up guard tripped at substep {substep}: state norm {norm:.6e} exceeds guard {guard:.6e}")]
    BlowUp { substep: usize, norm: f64, guard: f64 },

    #[error(
        "fixed-point inversion did not converge in {iters} iterations (last update {last_update:.3e}); \
         the shift map is not a contraction at this base point"
    )]
    FixedPoint { iters: usize, last_update: f64 },

    #[error("residual sampler exceeded {cap} proposals; total-variation distance is close to 1")]
    ResidualCap { cap: usize },

    #[error("step table infeasible: requested a2 = {a2:.6e} drives some a_n below 2*d0; largest feasible gap a1 - a2 = {max_gap:.6e}")]
    InfeasibleSteps { a2: f64, max_gap: f64 },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigParse { .. } | Error::Validation(_) | Error::Io(_) => 1,
            _ => 2,
        }
    }
}
