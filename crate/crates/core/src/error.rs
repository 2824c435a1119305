use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // -- tokenizer --
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("corpus too small: {reached} tokens reachable, {requested} requested")]
    CorpusTooSmall { reached: usize, requested: usize },
    #[error("unknown token id {id} (vocabulary size {vocab_size})")]
    UnknownTokenId { id: u32, vocab_size: usize },
    #[error("word {word:?} has {len} characters, need more than {min}")]
    WordTooShort { word: String, len: usize, min: usize },
    #[error("cannot split a {len}-character word into {requested} pieces")]
    TooManyPieces { requested: usize, len: usize },
    #[error("invalid typo position {position} for {word:?}: {reason}")]
    InvalidPosition {
        word: String,
        position: usize,
        reason: &'static str,
    },
    #[error("no valid nonword found after {attempts} attempts")]
    NoValidNonword { attempts: usize },

    // -- model --
    #[error("sequence of {len} tokens exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("bad intervention: {0}")]
    BadIntervention(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid model config: {0}")]
    InvalidModelConfig(String),

    // -- probes / linear algebra --
    #[error("empty training set")]
    EmptyTrainSet,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero vector")]
    ZeroVector,
    #[error("empty input")]
    EmptyInput,

    // -- patchscope --
    #[error("bad template {0:?}")]
    BadTemplate(String),
    #[error("empty decode target")]
    BadTarget,

    // -- experiments --
    #[error("unbalanced dataset: {words} words vs {nonwords} nonwords")]
    UnbalancedDataset { words: usize, nonwords: usize },
    #[error("no eligible words for {0}")]
    NoEligibleWords(String),
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    // -- vocabulary expansion --
    #[error("no candidate words with frequency >= {min_count}")]
    NoCandidates { min_count: usize },

    // -- harness --
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}: not valid UTF-8")]
    Encoding(PathBuf),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("internal error: {0}")]
    Internal(String),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Internal,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Internal => 4,
        }
    }
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::InvalidModelConfig(_) | Error::BadTemplate(_) => ErrorClass::Config,
            Error::Internal(_) | Error::NonFiniteLoss { .. } => ErrorClass::Internal,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
