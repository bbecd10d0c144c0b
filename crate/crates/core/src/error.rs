use thiserror::Error;

use crate::fedopt::RoundLog;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid sketch parameters: {0}")]
    InvalidSketchParams(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("{what} index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("top-k requires k <= d, got k={k}, d={d}")]
    InvalidTopK { k: usize, d: usize },

    #[error("clip bound must be positive and finite, got {0}")]
    InvalidClipBound(f64),

    #[error("invalid privacy parameter: {0}")]
    InvalidPrivacy(String),

    #[error("unknown protocol tag `{0}`")]
    UnknownProtocol(String),

    #[error("above-threshold mechanism already halted at query {0}")]
    AlreadyHalted(usize),

    #[error("client {client} row {row} has norm {norm} exceeding bound {bound}")]
    SensitivityViolation {
        client: usize,
        row: usize,
        norm: f64,
        bound: f64,
    },

    #[error("invalid field configuration: {0}")]
    InvalidField(String),

    #[error("value {value} overflows the {modulus_bits}-bit ring at scale 2^{scale_bits} with {clients} clients")]
    RangeOverflow {
        value: f64,
        modulus_bits: u32,
        scale_bits: u32,
        clients: usize,
    },

    #[error("masked aggregation needs at least 2 clients, got {0}")]
    TooFewClients(usize),

    #[error("message from client {client} is for round {got}, expected {expected}")]
    RoundMismatch {
        client: usize,
        expected: u64,
        got: u64,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("client pool exhausted: need {needed} clients, pool has {available}")]
    PoolExhausted { needed: usize, available: usize },

    #[error("sketch of {scalars} scalars exceeds the limit of {limit}")]
    SketchTooLarge { scalars: usize, limit: usize },

    #[error("training diverged at round {round}")]
    Diverged { round: usize, logs: Vec<RoundLog> },

    #[error("invalid task data: {0}")]
    InvalidTask(String),

    #[error("invalid metric input: {0}")]
    InvalidMetric(String),

    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
