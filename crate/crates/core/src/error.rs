use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("tape was created without recording; backward is unavailable")]
    NotRecording,

    #[error("out-of-vocabulary symbol `{0}`")]
    OutOfVocabulary(String),

    #[error("sequence of length {len} exceeds the maximum of {max}")]
    Overlong { len: usize, max: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("weights are not on the probability simplex (sum {sum}, min {min})")]
    NotOnSimplex { sum: f64, min: f64 },

    #[error("unknown tool `{0}`")]
    UnknownTool(String),

    #[error("target tool `{0}` is not among the candidates")]
    TargetNotCandidate(String),

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },

    #[error("unbounded radius: zero gradient with zero curvature")]
    UnboundedRadius,

    #[error("missing artifact `{artifact}`; run `{stage}` first")]
    MissingArtifact { artifact: PathBuf, stage: &'static str },

    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }
}
