use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: malformed file: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("invalid value at pixel {index}: {msg}")]
    Validation { index: usize, msg: String },
    #[error("unsupported format: {0}")]
    Unsupported(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("degenerate exposure range: {0}")]
    DegenerateRange(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values: {0}")]
    Numeric(String),
    #[error("training diverged at step {step} (seed {seed}): loss {loss}")]
    Divergence { step: usize, seed: u64, loss: f64 },
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("cannot align generated content with the input: {0}")]
    AlignmentImpossible(String),
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
}

impl Error {
    /// Stable machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Validation { .. } => "validation",
            Error::Unsupported(_) => "unsupported_format",
            Error::DegenerateInput(_) => "degenerate_input",
            Error::DegenerateRange(_) => "degenerate_range",
            Error::Shape(_) => "shape",
            Error::Numeric(_) => "numeric",
            Error::Divergence { .. } => "divergence",
            Error::MissingCheckpoint(_) => "missing_checkpoint",
            Error::AlignmentImpossible(_) => "alignment_impossible",
            Error::UndefinedCorrelation(_) => "undefined_correlation",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Config(_) => "config",
            Error::Json { .. } => "json",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }
}
