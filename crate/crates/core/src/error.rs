use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid relation `{0}`: expected the form /r/<Name>")]
    InvalidRelation(String),

    #[error("knowledge graph index is empty")]
    EmptyIndex,

    #[error("sample {sample_id}: fact {fact} is not present in the index")]
    UnknownFact { sample_id: String, fact: String },

    #[error("sample {sample_id}: answer node `{answer}` is neither head nor tail of the fact")]
    AnswerNotInFact { sample_id: String, answer: String },

    #[error("sample {sample_id}: head and tail spans overlap in the question")]
    AmbiguousSpans { sample_id: String, candidate: Box<crate::template::QuestionTemplate> },

    #[error("template {template_id}: source sample has no membership for fold {fold}")]
    MissingFoldMembership { template_id: String, fold: usize },

    #[error("invalid fold spec: {0}")]
    InvalidFold(String),

    #[error("duplicate prediction for sample {0}")]
    DuplicatePrediction(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown review item {0}")]
    NotFound(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("missing prerequisite {path}: run stage `{stage}` first")]
    Prerequisite { stage: String, path: PathBuf },
}

impl Error {
    /// Process exit status: 1 validation, 2 missing prerequisite, 3 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Prerequisite { .. } => 2,
            Error::Parse { .. }
            | Error::InvalidRelation(_)
            | Error::InvalidFold(_)
            | Error::DuplicatePrediction(_)
            | Error::Config(_)
            | Error::Validation(_) => 1,
            _ => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
