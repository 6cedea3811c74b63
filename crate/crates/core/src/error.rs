use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid noise schedule: {0}")]
    Schedule(String),

    #[error("power normalization is undefined for an all-zero latent")]
    ZeroNorm,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("timestep {t} outside [1, {max}]")]
    StepOutOfRange { t: usize, max: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite loss at step {step} ({what})")]
    NonFinite { step: usize, what: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint mismatch: denoiser was trained against autoencoder {expected}, got {found}")]
    CheckpointMismatch { expected: String, found: String },

    #[error("report: {0}")]
    Report(String),

    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn at(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Path { path, source }
    }
}
