use std::path::PathBuf;

/// Errors raised across the segmentation and preference-tuning pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape mismatch, out-of-bounds point, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value or unknown key.
    #[error("config error: {0}")]
    Config(String),

    /// A requested class or instance does not exist.
    #[error("lookup error: {0}")]
    Lookup(String),

    /// Scene generation could not place all instances.
    #[error("scene generation failed: {0}")]
    Generation(String),

    /// Dataset or checkpoint content does not match its recorded checksum or format.
    #[error("corrupt data: {0}")]
    Corruption(String),

    /// A loss or gradient became NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error at {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("JSON error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
