use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("missing required column `{0}` in readings header")]
    MissingColumn(String),

    #[error("cell ({row}, {col}) is outside the {n_rows}x{n_cols} grid")]
    CellOutOfGrid {
        row: usize,
        col: usize,
        n_rows: usize,
        n_cols: usize,
    },

    #[error("singular system in ridge solve (lambda = {lambda}); use lambda > 0")]
    SingularSystem { lambda: f64 },

    #[error("non-finite training loss at epoch {epoch}, batch {batch}: {loss}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },

    #[error("dataset too short: {0}")]
    TooShort(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact {path}; run `{stage}` first")]
    MissingArtifact { path: PathBuf, stage: &'static str },

    #[error("stale artifact {path}: config hash {found} does not match current {expected}; re-run `{stage}`")]
    StaleArtifact {
        path: PathBuf,
        stage: &'static str,
        found: String,
        expected: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
