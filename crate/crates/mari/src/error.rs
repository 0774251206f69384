use thiserror::Error;

/// Every failure the library reports.
///
/// [`MariError::code`] gives a stable machine-readable tag used by the CLI.
#[derive(Debug, Error)]
pub enum MariError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite value at {0}")]
    NonFinite(String),
    #[error("degenerate covariance: effective rank {effective_rank} < requested {requested}")]
    Degenerate {
        effective_rank: usize,
        requested: usize,
    },
    #[error("rank-deficient matrix: min singular value {min_singular_value:e}")]
    RankDeficient { min_singular_value: f64 },
    #[error("{what} did not converge within {iterations} iterations")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
    },
    #[error("token {token} at index {index} is outside the vocabulary")]
    OutOfVocab { index: usize, token: usize },
    #[error("sequence of length {len} exceeds context {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("pretraining reached held-out accuracy {achieved:.4}, below floor {floor:.4}")]
    AccuracyFloor { achieved: f64, floor: f64 },
    #[error("training diverged at step {step}")]
    Divergence { step: usize },
    #[error("checksum mismatch: expected {expected}, found {found}")]
    Checksum { expected: String, found: String },
    #[error("gate threshold has not been calibrated")]
    CalibrationMissing,
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl MariError {
    pub fn code(&self) -> &'static str {
        match self {
            MariError::Contract(_) => "CONTRACT_VIOLATION",
            MariError::Dimension { .. } => "DIMENSION_MISMATCH",
            MariError::NonFinite(_) => "NON_FINITE",
            MariError::Degenerate { .. } => "DEGENERATE_COVARIANCE",
            MariError::RankDeficient { .. } => "RANK_DEFICIENT",
            MariError::NoConvergence { .. } => "NO_CONVERGENCE",
            MariError::OutOfVocab { .. } => "OUT_OF_VOCAB",
            MariError::ContextOverflow { .. } => "CONTEXT_OVERFLOW",
            MariError::AccuracyFloor { .. } => "ACCURACY_FLOOR",
            MariError::Divergence { .. } => "DIVERGENCE",
            MariError::Checksum { .. } => "CHECKSUM_MISMATCH",
            MariError::CalibrationMissing => "CALIBRATION_MISSING",
            MariError::MissingArtifact(_) => "MISSING_ARTIFACT",
            MariError::Invalid(_) => "INVALID_INPUT",
            MariError::Io(_) => "IO_ERROR",
            MariError::Json(_) => "PARSE_ERROR",
        }
    }
}

pub type Result<T> = std::result::Result<T, MariError>;

pub(crate) fn ensure_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(MariError::Dimension { expected, got })
    }
}
