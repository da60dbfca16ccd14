use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes that do not fit together.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid user-supplied data (boxes, frames, datasets).
    #[error("invalid input: {0}")]
    Input(String),

    /// Malformed file contents.
    #[error("format error: {0}")]
    Format(String),

    /// Checkpoint or file written by an incompatible version.
    #[error("version error: {0}")]
    Version(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension {
        op,
        detail: detail.into(),
    }
}
