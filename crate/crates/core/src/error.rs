use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("line {line}: malformed JSON: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: missing field `{name}`")]
    MissingField { name: String, line: usize },
    #[error("line {line}: timestamp must be a non-negative integer")]
    BadTimestamp { line: usize },
    #[error("line {line}: text is empty after trimming")]
    EmptyText { line: usize },
    #[error("duplicate post id `{0}`")]
    DuplicatePostId(String),
    #[error("thread `{0}` has more than one explicit starter")]
    ConflictingStarters(String),
    #[error("thread `{0}` has every post explicitly marked as a non-starter")]
    MissingStarter(String),
    #[error("invalid synthetic corpus spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    IdOutOfRange { id: usize, vocab: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("time field out of range: {0}")]
    FieldOutOfRange(String),
    #[error("class index {index} out of range for {classes} classes")]
    IndexOutOfRange { index: usize, classes: usize },
    #[error("task `{0}` has an empty batch")]
    EmptyBatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("no walk of length >= 2 to train on")]
    EmptyWalkSet,
    #[error("invalid meta-path scheme `{scheme}`: {reason}")]
    InvalidScheme { scheme: String, reason: String },
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no query has another episode with the same label")]
    NoValidQueries,
    #[error("embedding set needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("embedding set rows and labels disagree: {rows} rows, {labels} labels")]
    LabelCount { rows: usize, labels: usize },
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training episodes for task `{0}`")]
    NoTrainingEpisodes(String),
    #[error("graph context enabled but no graph embeddings supplied")]
    MissingGraphEmbeddings,
    #[error("unknown market `{0}`")]
    UnknownMarket(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("episode refers to unknown post `{0}`")]
    UnknownPost(String),
}

/// Errors reading or writing the binary artifact formats.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

impl FormatError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}

/// Any failure of a multi-stage run.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Format(#[from] FormatError),
}
