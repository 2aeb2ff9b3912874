use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed data: {0}")]
    Format(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("signal too short: {len} samples, need at least {needed}")]
    InsufficientLength { len: usize, needed: usize },

    #[error("degenerate normalization statistics: lo = {lo}, hi = {hi}")]
    DegenerateStats { lo: f64, hi: f64 },

    #[error("invalid synthesis profile: {0}")]
    InvalidProfile(String),

    #[error("patch sampling: {0}")]
    Sampling(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint error at byte {offset}: {message}")]
    Checkpoint { offset: u64, message: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("no usable data: {0}")]
    EmptyCorpus(String),

    #[error(transparent)]
    Diff(#[from] noisim_diffcore::Error),
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
