use thiserror::Error;

/// Errors surfaced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value in {term}")]
    NonFinite { term: String },

    #[error("insufficient overlap: no cell is populated by two or more views")]
    InsufficientOverlap,

    #[error("optimization diverged: {0}")]
    Diverged(String),

    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }

    pub(crate) fn format(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            format,
            reason: reason.into(),
        }
    }

    /// Short stable identifier used in machine-readable error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Invalid { .. } => "E_INVALID",
            Error::ShapeMismatch { .. } => "E_SHAPE",
            Error::NonFinite { .. } => "E_NONFINITE",
            Error::InsufficientOverlap => "E_OVERLAP",
            Error::Diverged(_) => "E_DIVERGED",
            Error::Format { .. } => "E_FORMAT",
            Error::Io(_) => "E_IO",
            Error::Json(_) => "E_JSON",
            Error::Image(_) => "E_IMAGE",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
