use thiserror::Error;

/// Errors raised by the numerical routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("singular kernel: covariance determinant {det:e}")]
    SingularKernel { det: f64 },
    #[error("division guard tripped: |{what}| = {value:e}")]
    DivisionGuard { what: &'static str, value: f64 },
    #[error("coercivity check failed, worst margin {margin}")]
    Coercivity { margin: f64 },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("empty lattice")]
    EmptyLattice,
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("degenerate flow: d_nu gamma = {0:e}")]
    DegenerateFlow(f64),
    #[error("stability violation: {0}")]
    Stability(String),
    #[error("degenerate mass {0:e}")]
    DegenerateMass(f64),
    #[error("extrapolation outside lattice: {0}")]
    Extrapolation(String),
    #[error("observable not finite or exceeds its bound on the lattice")]
    Unbounded,
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
