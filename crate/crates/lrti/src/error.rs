//! Error type shared by every module in the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
///
/// Dimension and alignment errors always name the offending shapes so a
/// failing call can be diagnosed without a debugger.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Flow or patch grids incompatible with the feature they align.
    #[error("alignment error: {0}")]
    Alignment(String),

    /// A configuration value is out of range or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// The caller used an API outside its contract (e.g. backward on a
    /// non-scalar, or no active recording).
    #[error("usage error: {0}")]
    Usage(String),

    /// A file failed to parse; `offset` is the byte position of the failure.
    #[error("parse error in {path} at byte {offset}: {msg}")]
    Parse {
        path: PathBuf,
        offset: usize,
        msg: String,
    },

    /// Input data is invalid (non-finite values, missing frames, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Training diverged or produced a non-finite loss.
    #[error("training error: {0}")]
    Training(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Wrap an io::Error together with the path that produced it.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by how the library was invoked rather than by
    /// the data it was given; CLI maps these to exit code 2.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Usage(_) | Error::Config(_) | Error::Parse { .. }
        )
    }
}
