use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("list {list}: duplicate position {position}")]
    DuplicatePosition { list: String, position: u64 },

    #[error("list {list} has {len} items, at least {min} are required")]
    ListTooShort { list: String, len: usize, min: usize },

    #[error("no embedding for item {0}")]
    MissingEmbedding(String),

    #[error("unknown user {0}")]
    UnknownUser(String),

    #[error("item index {0} is the padding item or outside the catalog")]
    InvalidItem(usize),

    #[error("every prefix position is padding")]
    EmptyPrefix,

    #[error("candidate pool too small: need {needed}, {available} eligible")]
    InsufficientCandidates { needed: usize, available: usize },

    #[error("non-finite loss at instance {0}")]
    NonFiniteLoss(usize),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("no co-occurrence training pairs (every list has a single item)")]
    NoTrainingPairs,

    #[error("reports cover different lists: {0}")]
    MismatchedLists(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
