use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate spectrum: no eigenvalue above threshold")]
    DegenerateSpectrum,
    #[error("window of {0} states is too small, need at least 2")]
    WindowTooSmall(usize),
    #[error("trajectory has {len} states, window needs {window}")]
    TrajectoryTooShort { len: usize, window: usize },
    #[error("series has {len} entries, sustain window needs {sustain}")]
    InsufficientSeries { len: usize, sustain: usize },
    #[error("all samples are identical, covariance is zero")]
    DegenerateSamples,
    #[error("no probe candidates")]
    NoCandidates,
    #[error("division by zero: {0}")]
    DivisionByZero(String),
    #[error("jacobi sweeps did not converge after {0} sweeps")]
    NoConvergence(usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("config error: {0}")]
    Config(String),
    #[error("backend error: {0}")]
    Backend(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
