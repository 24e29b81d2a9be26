use thiserror::Error;

/// Errors produced across the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("malformed packet: {0}")]
    MalformedPacket(String),

    #[error("fixed-point overflow: {0} is outside the Q16.16 range")]
    Overflow(f64),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("protocol violation: {0}")]
    ProtocolViolation(String),

    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error("precision must be in 1..=8, got {0}")]
    Precision(u32),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("data error: {0}")]
    Data(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("liveness failure at {horizon_ns} ns: stuck slots {stuck:?}")]
    Liveness {
        horizon_ns: u64,
        /// (worker, slot) pairs still in flight when the horizon was reached.
        stuck: Vec<(usize, u16)>,
    },

    #[error("simulation deadlock at {0} ns: event queue drained before the workload finished")]
    Deadlock(u64),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
