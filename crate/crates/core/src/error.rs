use std::path::PathBuf;

use thiserror::Error;

use crate::catalog::Code;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient items: {items} items cannot seed {vocab} centroids")]
    InsufficientItems { items: usize, vocab: usize },

    #[error("non-finite value in feature vector of item {0}")]
    NonFinite(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("vocabulary exhausted: no free last-level code for item {0}")]
    VocabularyExhausted(String),

    #[error("duplicate semantic id {sid:?} shared by items {first} and {second}")]
    DuplicateSid {
        sid: Vec<Code>,
        first: String,
        second: String,
    },

    #[error("invalid semantic id for item {item}: {reason}")]
    InvalidSid { item: String, reason: String },

    #[error("unknown item {0}")]
    UnknownItem(String),

    #[error("no records in {}", .0.display())]
    NoRecords(PathBuf),

    #[error("malformed record at {}:{line}: {reason}", .path.display())]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("sequence of user {user} references unknown item {item}")]
    UnknownInteractionItem { user: String, item: String },

    #[error("sequence of user {user} has {len} interactions; at least 3 are required")]
    ShortSequence { user: String, len: usize },

    #[error("prefix {0:?} is not a node of the decoding trie")]
    UnknownPrefix(Vec<Code>),

    #[error("decoding trie is empty")]
    EmptyTrie,

    #[error("invalid permutation {0:?}")]
    InvalidPermutation(Vec<usize>),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("user history is empty")]
    EmptyHistory,

    #[error("step {step} is inconsistent with the given prefix: {reason}")]
    StepMismatch { step: usize, reason: String },

    #[error("masked distribution needs at least one valid token")]
    EmptyMask,

    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("model has no latent vocabulary")]
    NoLatentVocabulary,

    #[error("enumeration guard exceeded: {paths} leaf paths (limit {limit}); use beam_search instead")]
    GuardExceeded { paths: usize, limit: usize },

    #[error("zero variance")]
    ZeroVariance,

    #[error("all observations are tied")]
    AllTied,

    #[error("invalid argument {name}: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("invalid configuration value for {key}: {reason}")]
    Config { key: String, reason: String },

    #[error("io error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn arg(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }
}
