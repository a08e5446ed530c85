use crate::{ItemId, UserId};
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: rating {rating} outside [1, 5]")]
    RatingRange { line: usize, rating: i64 },

    #[error("rating matrix is empty")]
    EmptyMatrix,

    #[error("unknown user {0}")]
    UnknownUser(UserId),

    #[error("unknown item {0}")]
    UnknownItem(ItemId),

    #[error("similarity of user {0} with itself requested")]
    SelfSimilarity(UserId),

    #[error("cannot form {k} clusters from {users} users")]
    TooManyClusters { k: usize, users: usize },

    #[error("no similarity entry for user {0}")]
    MissingSimilarity(UserId),

    #[error("neighbor set of size {requested} requested from {available} candidates")]
    TooFewCandidates { requested: usize, available: usize },

    #[error("enumeration support of {0} sets exceeds the oracle limit")]
    SupportTooLarge(f64),

    #[error("weight vectors do not share the same candidate list")]
    MismatchedCandidates,

    #[error("duplicate candidate {0}")]
    DuplicateCandidate(UserId),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("malformed cluster cache: {0}")]
    ClusterCache(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
