use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// The batch size sits at or below the stall bound `½·ε·B_noise(s)`.
    #[error("stall: batch size {batch} does not exceed the stall bound {bound} at full-batch step {step}")]
    Stall { batch: f64, bound: f64, step: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("fit diverged: {0}")]
    FitDiverged(String),

    #[error("ordering violation: {0}")]
    OrderingViolation(String),

    #[error("insufficient overlap: loss ranges [{a_lo}, {a_hi}] and [{b_lo}, {b_hi}] do not intersect")]
    InsufficientOverlap { a_lo: f64, a_hi: f64, b_lo: f64, b_hi: f64 },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("non-positive batch size {batch} at switch {index}")]
    NonPositiveBatch { index: usize, batch: f64 },

    #[error("monotonicity violation: row for batch size {batch} is not decreasing at data index {index}")]
    MonotonicityViolation { batch: f64, index: usize },

    /// The fixed-data and fixed-loss optima disagree somewhere on a surface.
    #[error("equivalence check failed: {0}")]
    EquivalenceFailed(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("missing artifacts: {0}")]
    MissingArtifacts(String),

    #[error("parse error in {source_name} at line {line}: {message}")]
    Parse { source_name: String, line: usize, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context { context: context.into(), source: Box::new(self) }
    }

    /// The innermost error, with all context layers peeled off.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// Stable machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self.root() {
            Error::Stall { .. } => "stall",
            Error::Domain(_) => "domain",
            Error::InsufficientData(_) => "insufficient_data",
            Error::FitDiverged(_) => "fit_diverged",
            Error::OrderingViolation(_) => "ordering_violation",
            Error::InsufficientOverlap { .. } => "insufficient_overlap",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::NonPositiveBatch { .. } => "non_positive_batch",
            Error::MonotonicityViolation { .. } => "monotonicity_violation",
            Error::EquivalenceFailed(_) => "equivalence_failed",
            Error::InvalidInput(_) => "invalid_input",
            Error::InvalidConfig(_) => "invalid_config",
            Error::MissingArtifacts(_) => "missing_artifacts",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Context { .. } => unreachable!("root() strips context"),
        }
    }

    /// Process exit code: 2 invalid config, 3 fit failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Io { .. } => 4,
            Error::InvalidConfig(_)
            | Error::MissingArtifacts(_)
            | Error::Parse { .. }
            | Error::Json(_)
            | Error::InvalidInput(_)
            | Error::LengthMismatch { .. } => 2,
            _ => 3,
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn context(self, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| e.context(context()))
    }
}
