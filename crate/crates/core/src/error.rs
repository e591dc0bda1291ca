use std::path::PathBuf;

/// Errors produced by the simulator library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{what} index {index} out of range (limit {limit})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("matrix is rank deficient at column {column}")]
    RankDeficient { column: usize },

    #[error("normal matrix is singular")]
    Singular,

    #[error("transform length {0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("unsupported modulation order {0}")]
    UnsupportedOrder(usize),

    #[error("bit count {bits} is not a multiple of {per_symbol} bits per symbol")]
    BitCount { bits: usize, per_symbol: usize },

    #[error("pilot entry {index} is not unit modulus (|p| = {modulus})")]
    NonUnitPilot { index: usize, modulus: f64 },

    #[error("precoder column for user {user} on subcarrier {subcarrier} is all zero")]
    DegenerateColumn { user: usize, subcarrier: usize },

    #[error("antenna {0} cannot sound itself")]
    SelfSounding(usize),

    #[error("calibration table is invalid: {0}")]
    InvalidCalibration(String),

    #[error("missing antenna {antenna} stream in subsystem {subsystem}")]
    MissingAntenna { subsystem: usize, antenna: usize },

    #[error("missing partition {partition} for subsystem {subsystem}, antenna {antenna}")]
    MissingPartition {
        subsystem: usize,
        antenna: usize,
        partition: usize,
    },

    #[error("{0}")]
    Parse(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
