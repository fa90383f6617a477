use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
///
/// Variants are grouped by failure class so the command-line front end can
/// map them onto distinct exit codes (see [`Error::exit_code`]).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid residue '{ch}' at line {line}")]
    InvalidResidue { ch: char, line: usize },

    #[error("malformed FASTA at line {line}: {reason}")]
    MalformedFasta { line: usize, reason: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid sequence: {0}")]
    InvalidSequence(String),

    #[error("degenerate pool: {0}")]
    DegeneratePool(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("sequence too short: length {len}, need at least {min}")]
    TooShort { len: usize, min: usize },

    #[error("missing score for attribute '{0}'")]
    MissingAttribute(String),

    #[error("unknown attribute '{name}' (known: {known})")]
    UnknownAttribute { name: String, known: String },

    #[error("no valid preference pairs")]
    NoValidPairs,

    #[error("context overflow: {needed} positions exceed context of {context}")]
    ContextOverflow { needed: usize, context: usize },

    #[error("prefix shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error in field '{field}': {reason}")]
    Config { field: String, reason: String },

    #[error("unknown {kind} '{name}' (registered: {known})")]
    UnknownStrategy { kind: &'static str, name: String, known: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("reference policy was modified during training")]
    ReferenceMutated,

    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code: 1 usage/config, 2 data, 3 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. }
            | Error::UnknownStrategy { .. }
            | Error::UnknownAttribute { .. }
            | Error::InvalidArgument(_) => 1,
            Error::Divergence { .. } => 3,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}
