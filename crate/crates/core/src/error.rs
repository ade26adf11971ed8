use std::path::PathBuf;

/// Errors raised by surrogate fitting, engines, and the experiment harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("population model required while its acquisition weight is {0}")]
    MissingPopulationModel(f64),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("unknown engine kind `{0}`")]
    UnknownEngine(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid state file: {0}")]
    State(String),

    #[error("report: {0}")]
    Report(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag for machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::Factorization(_) => "factorization",
            Error::Empty(_) => "empty_input",
            Error::MissingPopulationModel(_) => "missing_population_model",
            Error::Protocol(_) => "protocol",
            Error::UnknownEngine(_) => "unknown_engine",
            Error::UnknownPreset(_) => "unknown_preset",
            Error::Config(_) => "config",
            Error::State(_) => "state",
            Error::Report(_) => "report",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
