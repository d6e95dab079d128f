use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid bipartition: {0}")]
    InvalidCut(String),

    #[error("sign problem: {0}")]
    SignProblemUnsupported(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("corrupted snapshot stream: {0}")]
    CorruptedStream(String),

    #[error("metadata mismatch: {0}")]
    MetadataMismatch(String),

    #[error("empty accumulator")]
    EmptyAccumulator,

    #[error("all eigenvalues fall below the floor {0:e}")]
    AllBelowFloor(f64),

    #[error("eigensolver did not converge: {0}")]
    NoConvergence(String),

    #[error("system too large for exact treatment: {0}")]
    TooLarge(String),

    #[error("incomplete eigenbasis: {0}")]
    IncompleteBasis(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("world-line inconsistency: {0}")]
    WorldLine(String),

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("{stage} stage")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            Error::Stage { .. } => self,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// The error with any stage attribution removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Maps an unexpected EOF from a binary reader to `CorruptFile`.
    pub(crate) fn from_read(err: io::Error, what: &str) -> Self {
        if err.kind() == io::ErrorKind::UnexpectedEof {
            Error::CorruptFile(format!("{what}: truncated"))
        } else {
            Error::Io(err)
        }
    }
}
