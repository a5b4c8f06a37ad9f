use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("out of symmetric heap: requested {requested} bytes, {remaining} bytes remaining")]
    OutOfHeap { requested: usize, remaining: usize },

    #[error("address {linear:#x} is outside the arena of rank {rank} ([{base:#x}, {end:#x}))")]
    OutsideArena {
        rank: usize,
        linear: u64,
        base: u64,
        end: u64,
    },

    #[error("address {linear:#x} is not aligned to {align} bytes")]
    Misaligned { linear: u64, align: usize },

    #[error("dtype mismatch: cell holds {expected}, operand is {actual}")]
    DTypeMismatch {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("asymmetric collective allocation on rank {rank}: {detail}")]
    Asymmetric { rank: usize, detail: String },

    #[error("resource error: {0}")]
    Resource(String),

    #[error("barrier timed out after {waited_ms} ms; absent ranks: {absent:?}")]
    BarrierTimeout { waited_ms: u128, absent: Vec<usize> },

    #[error("deadlock suspected: {0}")]
    Deadlock(String),

    #[error("data corruption: {0}")]
    DataCorruption(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("kernel failed: {0}")]
    Kernel(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
