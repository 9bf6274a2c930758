use std::path::Path;

use serde::Serialize;
use urm_core::error::{CorpusError, EvalError, FormatError, GraphError, ModelError, PipelineError, TrainError};

/// Exit-code class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Usage,
    Data,
    Internal,
}

impl Kind {
    pub fn code(self) -> i32 {
        match self {
            Kind::Usage => 1,
            Kind::Data => 2,
            Kind::Internal => 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

impl CliError {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into(), path: None }
    }
    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(Kind::Usage, message)
    }
    pub fn data(message: impl Into<String>) -> Self {
        Self::new(Kind::Data, message)
    }
    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(Kind::Internal, message)
    }
    pub fn with_path(mut self, path: &Path) -> Self {
        self.path = Some(path.display().to_string());
        self
    }
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::data(format!("{}: {e}", path.display())).with_path(path)
    }

    /// Single-line JSON for standard error.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        let path = match &e {
            FormatError::Io { path, .. } => Some(path.clone()),
            _ => None,
        };
        Self { kind: Kind::Data, message: e.to_string(), path: path.map(|p| p.display().to_string()) }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) | ModelError::DimensionMismatch(_) | ModelError::IdOutOfRange { .. } => Self::data(e.to_string()),
            _ => Self::internal(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            other => Self::data(other.to_string()),
        }
    }
}

macro_rules! data_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::data(e.to_string())
            }
        }
    )*};
}
data_errors!(CorpusError, GraphError, EvalError);

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Corpus(e) => e.into(),
            PipelineError::Graph(e) => e.into(),
            PipelineError::Train(e) => e.into(),
            PipelineError::Eval(e) => e.into(),
            PipelineError::Format(e) => e.into(),
        }
    }
}
