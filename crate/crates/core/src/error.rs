use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
///
/// The variants are grouped so the CLI can map them onto exit codes:
/// configuration problems, data/IO problems and numeric failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("unknown parameter group `{0}` (expected unet_encoder, unet_decoder, vit or projector)")]
    UnknownGroup(String),

    #[error("corrupt checkpoint manifest {path}: {reason}")]
    CorruptManifest { path: PathBuf, reason: String },

    #[error("weights blob {path} is truncated: expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("size mismatch in {path}: {reason}")]
    SizeMismatch { path: PathBuf, reason: String },

    #[error("tensor `{name}` spans bytes {start}..{end} but the weights blob holds {len} bytes")]
    Range {
        name: String,
        start: u64,
        end: u64,
        len: u64,
    },

    #[error("tensor mismatch: {0}")]
    TensorMismatch(String),

    #[error("non-finite loss {value} in stage {stage} at step {step}")]
    NonFinite { stage: u8, step: usize, value: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Attaches a path to IO errors.
pub(crate) trait IoContext<T> {
    fn at(self, path: impl AsRef<std::path::Path>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl AsRef<std::path::Path>) -> Result<T> {
        self.map_err(|e| Error::io(path.as_ref(), e))
    }
}
