use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("malformed archive {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("inconsistent data: {0}")]
    Consistency(String),

    #[error("unknown domain `{0}` (expected indoor, outdoor or aerial)")]
    Domain(String),

    #[error("could not place {requested} objects in a {extent} m scene after {attempts} attempts")]
    Placement {
        requested: usize,
        extent: f32,
        attempts: usize,
    },

    #[error("batch statistics need at least 2 rows, got {0}")]
    DegenerateBatch(usize),

    #[error("model state: {0}")]
    State(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn input_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}
