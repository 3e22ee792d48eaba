//! Crate-wide error type.

use thiserror::Error;

/// Phase of a federated round, used to tag protocol failures so an aborted
/// round can be diagnosed and resumed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundPhase {
    Broadcast,
    LocalTraining,
    Aggregating,
    Published,
}

impl std::fmt::Display for RoundPhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            RoundPhase::Broadcast => "broadcast",
            RoundPhase::LocalTraining => "local-training",
            RoundPhase::Aggregating => "aggregating",
            RoundPhase::Published => "published",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty shard")]
    EmptyShard,

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("empty test set")]
    EmptyTestSet,

    #[error("non-finite value in layer {layer}")]
    NonFinite { layer: String },

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenIdOutOfRange { id: usize, vocab_size: usize },

    #[error("word not in vocabulary: {0:?}")]
    UnknownWord(String),

    #[error("class {class} has no samples")]
    ClassMissing { class: usize },

    #[error("row {row}: unrecognized label {label:?}")]
    UnknownLabel { row: usize, label: String },

    #[error("row {row}: {message}")]
    CsvRow { row: usize, message: String },

    #[error("embedding file line {line}: expected {expected} values, found {actual}")]
    EmbeddingDim {
        line: usize,
        expected: usize,
        actual: usize,
    },

    #[error("embedding file line {line}: {message}")]
    EmbeddingLine { line: usize, message: String },

    #[error("invalid shard plan: {0}")]
    InvalidPlan(String),

    #[error("fedavg requires at least one contribution")]
    NoContributions,

    #[error("fedavg: total contribution size is zero")]
    ZeroTotalSize,

    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("bad magic in parameter payload")]
    BadMagic,

    #[error("unsupported payload version {0}")]
    BadVersion(u16),

    #[error("truncated parameter payload")]
    Truncated,

    #[error("malformed payload: {0}")]
    Malformed(String),

    #[error("blob not found: {0}")]
    BlobNotFound(String),

    #[error("transport protocol error: {0}")]
    Protocol(String),

    #[error("round {round}: timed out at the barrier, missing clients {missing:?}")]
    BarrierTimeout { round: usize, missing: Vec<usize> },

    #[error("round {round} failed during {phase}: {source}")]
    Round {
        round: usize,
        phase: RoundPhase,
        #[source]
        source: Box<Error>,
    },

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("inference profile requires exactly {expected} samples, got {actual}")]
    SampleCount { expected: usize, actual: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Wraps an error with the round and phase it occurred in.
    pub fn in_phase(self, round: usize, phase: RoundPhase) -> Error {
        Error::Round {
            round,
            phase,
            source: Box::new(self),
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Error {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
