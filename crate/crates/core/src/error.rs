use thiserror::Error;

/// Failures from the control-history buffer.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum HistoryError {
    #[error("push at t={got} breaks the uniform grid (expected t={expected})")]
    NonUniformPush { expected: f64, got: f64 },
    #[error("query at t={requested} is before the recorded history (earliest available t={earliest})")]
    BeforeHistory { requested: f64, earliest: f64 },
    #[error("query at t={requested} is after the newest sample (t={latest})")]
    AfterHistory { requested: f64, latest: f64 },
    #[error("derivative query at t={requested} lacks a guard sample (window [{earliest}, {latest}])")]
    InsufficientMargin { requested: f64, earliest: f64, latest: f64 },
    #[error("horizon {horizon} exceeds recorded history ({available})")]
    HorizonTooLong { horizon: f64, available: f64 },
    #[error("invalid history parameter: {0}")]
    Invalid(String),
}

/// Failures of the predictor solvers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolveError {
    #[error("fixed-point iteration did not converge after {iterations} iterations (last residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("non-finite value in predictor at grid node {node}")]
    Divergence { node: usize },
    #[error("invalid solver argument: {0}")]
    Invalid(String),
}

/// Failures while reading model or dataset files.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum FormatError {
    #[error("missing section `{0}`")]
    MissingSection(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("dimension mismatch in `{what}`: expected {expected}, found {found}")]
    DimensionMismatch { what: String, expected: usize, found: usize },
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("payload length mismatch: expected {expected} values, found {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("file has a header but no payload records")]
    EmptyPayload,
}

/// Crate-level error.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown system `{0}`")]
    UnknownSystem(String),
    #[error(transparent)]
    History(#[from] HistoryError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("simulation diverged at t={t}: {reason}")]
    Diverged { t: f64, reason: String },
    #[error("training failed: {0}")]
    Training(String),
    #[error("dataset generation failed: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than by the computation.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::UnknownSystem(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
