use std::fmt;

/// Structural problems found while decoding an FVB or VIDX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FormatIssue {
    BadMagic,
    UnsupportedVersion(u32),
    Truncated,
    TrailingBytes,
    LabelCountMismatch { header: u64, labels: u64 },
    NonFinite,
    NotNormalized,
    BadIndexKind(u8),
    Checksum { stored: u64, computed: u64 },
    InvalidUtf8,
    Inconsistent(String),
}

impl fmt::Display for FormatIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FormatIssue::BadMagic => write!(f, "bad magic"),
            FormatIssue::UnsupportedVersion(v) => write!(f, "unsupported format version {v}"),
            FormatIssue::Truncated => write!(f, "truncated payload"),
            FormatIssue::TrailingBytes => write!(f, "unexpected trailing bytes"),
            FormatIssue::LabelCountMismatch { header, labels } => {
                write!(
                    f,
                    "label count mismatch: header says {header}, found {labels} labels"
                )
            }
            FormatIssue::NonFinite => write!(f, "non-finite value"),
            FormatIssue::NotNormalized => {
                write!(f, "vector flagged normalized does not have unit norm")
            }
            FormatIssue::BadIndexKind(k) => write!(f, "unknown index kind {k}"),
            FormatIssue::Checksum { stored, computed } => write!(
                f,
                "checksum mismatch: stored {stored:#018x}, computed {computed:#018x}"
            ),
            FormatIssue::InvalidUtf8 => write!(f, "invalid UTF-8"),
            FormatIssue::Inconsistent(msg) => write!(f, "inconsistent payload: {msg}"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in vector {row} at component {col}")]
    NonFinite { row: usize, col: usize },

    #[error("vector {row} has near-zero norm and cannot be normalized")]
    ZeroNorm { row: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),

    #[error("{issue} at byte offset {offset}")]
    Format { offset: u64, issue: FormatIssue },

    #[error("parse error on row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(offset: u64, issue: FormatIssue) -> Self {
        Error::Format { offset, issue }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
