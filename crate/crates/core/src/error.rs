use thiserror::Error;

pub type Result<T, E = GopError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GopError {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("normalization statistics for layer {layer} were never fitted")]
    UnfitNormalization { layer: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed document at `{path}`: {message}")]
    Format { path: String, message: String },

    #[error("linear system is numerically singular (rank {rank} of {expected}); use a positive ridge coefficient")]
    SingularSystem { rank: usize, expected: usize },

    #[error("loss became non-finite during epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("improvement rate undefined for a zero baseline")]
    DegenerateBaseline,

    #[error("every operator-set candidate failed to produce a finite solution")]
    AllCandidatesFailed,

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("row {row} has {found} fields, expected {expected}")]
    RaggedRows {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("unknown label column `{0}`")]
    UnknownLabelColumn(String),

    #[error("class `{class}` has {count} samples, too few to stratify over {splits} splits")]
    ClassTooSmall {
        class: String,
        count: usize,
        splits: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl GopError {
    pub(crate) fn dims(context: impl Into<String>, expected: usize, found: usize) -> Self {
        GopError::DimensionMismatch {
            context: context.into(),
            expected,
            found,
        }
    }

    pub(crate) fn format(path: impl Into<String>, message: impl Into<String>) -> Self {
        GopError::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        GopError::Io {
            path: path.into(),
            source,
        }
    }
}
