use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("length {len} is not a power of two")]
    NotPowerOfTwo { len: usize },

    #[error("signal too short: {len} samples, need at least {required}")]
    SignalTooShort { len: usize, required: usize },

    #[error("frequency {freq} Hz is at or above Nyquist ({nyquist} Hz)")]
    AboveNyquist { freq: f64, nyquist: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("training diverged at epoch {epoch} (loss is not finite)")]
    Divergence { epoch: usize },

    #[error("GAN training diverged at epoch {epoch}")]
    GanDivergence {
        epoch: usize,
        history: Box<crate::wgan::WganHistory>,
    },

    #[error("loss is not finite")]
    NonFiniteLoss,

    #[error("cannot choose {k} centroids from {distinct} distinct points")]
    TooFewPoints { k: usize, distinct: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("missing artifact from stage `{stage}`: {detail}")]
    MissingArtifact { stage: String, detail: String },

    #[error("stale artifact from stage `{stage}`: {detail}")]
    StaleArtifact { stage: String, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
