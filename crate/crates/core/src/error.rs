use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("group signature mismatch: {0}")]
    SignatureMismatch(String),

    #[error("model singularity: {0}")]
    Singularity(String),

    #[error("rollout diverged in control interval {interval}")]
    Diverged { interval: usize },

    #[error("solver diverged: {0}")]
    SolverDiverged(String),

    #[error("singular KKT Jacobian (condition estimate {condition:.3e})")]
    SingularKkt { condition: f64 },

    #[error("static solve did not converge after {iterations} iterations (dyn residual {residual_dyn:.3e}, kkt residual {residual_kkt:.3e})")]
    StaticNotConverged {
        iterations: usize,
        residual_dyn: f64,
        residual_kkt: f64,
    },

    #[error("singular H_uu: hypothesis 1 of the exponential turnpike theorem is violated")]
    SingularHuu,

    #[error("eigenvalue iteration did not converge")]
    EigenNoConvergence,

    #[error("eigenpair residual {0:.3e} exceeds 1e-8")]
    EigenResidual(f64),

    #[error("point is not a critical point of the field (residual {0:.3e})")]
    NotCritical(f64),

    #[error("no feasible grid point within slack")]
    EmptyFeasibleSet,

    #[error("trajectory has no reconstructed group component")]
    MissingGroup,

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code: 2 for bad input, 3 for a static solve that did not
    /// converge, 4 for divergence, 1 for any other failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::Json(_) | Error::Parse(_) => 2,
            Error::StaticNotConverged { .. } => 3,
            Error::Diverged { .. } | Error::SolverDiverged(_) => 4,
            _ => 1,
        }
    }
}
