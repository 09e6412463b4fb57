use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("length error: sequence of {len} tokens exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },

    #[error("contract error: {0}")]
    Contract(String),

    #[error("numeric error in `{param}`: {detail}")]
    Numeric { param: String, detail: String },

    #[error("degenerate batch: every target position is ignored")]
    DegenerateBatch,

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("alphabet error: unsupported character {0:?}")]
    Alphabet(char),

    #[error("framing error: {0}")]
    Framing(String),

    #[error("format error in {record}: {detail}")]
    Format { record: String, detail: String },

    #[error("dependency error: {0}")]
    Dependency(String),

    #[error("synthesis error: {0}")]
    Synthesis(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors a caller can fix by changing inputs or config,
    /// as opposed to failures during computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Dependency(_)
                | Error::Alphabet(_)
                | Error::Contract(_)
                | Error::Data(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
