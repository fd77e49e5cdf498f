use std::path::PathBuf;

/// Errors raised anywhere in the restoration pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value is outside its valid range.
    #[error("config error: {0}")]
    Config(String),

    /// Input data violates a mathematical precondition.
    #[error("domain error: {0}")]
    Domain(String),

    /// Tensor or image shapes do not agree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A step index is outside the schedule.
    #[error("step {t} out of range for a schedule of {steps} steps")]
    StepOutOfRange { t: usize, steps: usize },

    /// Malformed or missing data files.
    #[error("data error: {0}")]
    Data(String),

    /// A computation produced NaN or infinity.
    #[error("numerical failure at step {t}: {detail}")]
    Numerical { t: usize, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Codec {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
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
