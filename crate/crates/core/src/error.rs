use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated IDX payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("unsupported image dimensions {rows}x{cols}, expected 28x28")]
    Dimension { rows: u32, cols: u32 },
    #[error("corrupt label {value} at index {index}")]
    CorruptLabel { index: usize, value: u8 },
    #[error("image/label count mismatch: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("index {index} out of bounds for dimension {bound}")]
    IndexOutOfBounds { index: usize, bound: usize },
    #[error("minor order {0} unsupported (only 1, 2, 3)")]
    UnsupportedOrder(usize),
    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },
    #[error("rejection budget exhausted after {attempts} attempts (k={k}, min_dist={min_dist})")]
    RejectionExhausted {
        k: usize,
        min_dist: f64,
        attempts: usize,
    },

    #[error("snapshot format error: {0}")]
    Snapshot(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("empty results: {0}")]
    EmptyResults(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by missing or malformed input data.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::BadMagic { .. }
                | Error::Truncated { .. }
                | Error::Dimension { .. }
                | Error::CorruptLabel { .. }
                | Error::CountMismatch { .. }
        )
    }

    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidArgument(_))
    }
}
