use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite after {attempts} jitter attempts")]
    NotPositiveDefinite { attempts: usize },

    #[error("eigensolver did not converge within {max_iterations} iterations")]
    ConvergenceFailure { max_iterations: usize },

    #[error("function evaluation was not finite at coordinate {coordinate}")]
    NonFiniteEvaluation { coordinate: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix orders differ: {left} vs {right}")]
    OrderMismatch { left: usize, right: usize },

    #[error("label vector has length {found}, expected {expected}")]
    LabelLengthMismatch { expected: usize, found: usize },

    #[error("invalid lambda {lambda}: {reason}")]
    InvalidLambda { lambda: f64, reason: String },

    #[error("band {band} is outside 1..={max}")]
    BandOutOfRange { band: usize, max: usize },

    #[error("cannot place {centers} simplex centers in {dim} dimensions")]
    InfeasibleDimension { centers: usize, dim: usize },

    #[error("delta must lie in (0, 1), got {0}")]
    InvalidDelta(f64),

    #[error("precondition violated: {0}")]
    PreconditionViolated(String),

    #[error("degenerate denominator: {0}")]
    DegenerateDenominator(String),

    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize, losses: Vec<f64> },

    #[error("invalid encode mode `{0}`")]
    ModeInvalid(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
