use std::io;
use std::path::PathBuf;

use mf2_core::annotation::{AnnotateError, AnnotationFailure, CurationError, PromptError};
use mf2_core::data::fixture::FixtureError;
use mf2_core::data::ManifestError;
use mf2_core::dfn::DfnError;
use mf2_core::metrics::MetricsError;
use mf2_core::model::ModelError;
use mf2_core::train::TrainError;

use crate::config::ConfigError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}:{line}: malformed record: {reason}", path.display())]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{}:{line}: unknown label {label:?}", path.display())]
    UnknownLabel {
        path: PathBuf,
        line: usize,
        label: String,
    },
    #[error("{}: {source}", path.display())]
    Manifest {
        path: PathBuf,
        source: ManifestError,
    },
    #[error("{}: {reason}", path.display())]
    Image { path: PathBuf, reason: String },
    #[error("{}: {reason}", path.display())]
    Checkpoint { path: PathBuf, reason: String },
    #[error("no captions for sample {0}")]
    MissingCaptions(String),
    #[error("{} caption(s) failed; first: {}", .0.len(), .0[0])]
    AnnotationFailed(Vec<AnnotationFailure>),
    #[error("run directory {} already exists; pass --force to replace it", .0.display())]
    RunExists(PathBuf),
    #[error("variant {variant}: {source}")]
    Variant { variant: String, source: Box<Error> },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Fixture(#[from] FixtureError),
    #[error(transparent)]
    Curation(#[from] CurationError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dfn(#[from] DfnError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl Error {
    /// Stable name of the variant, for structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "Io",
            Error::MalformedRecord { .. } => "MalformedRecord",
            Error::UnknownLabel { .. } => "UnknownLabel",
            Error::Manifest { .. } => "DuplicateFrame",
            Error::Image { .. } => "Image",
            Error::Checkpoint { .. } => "Checkpoint",
            Error::MissingCaptions(_) => "MissingCaptions",
            Error::AnnotationFailed(_) => "AnnotationFailed",
            Error::RunExists(_) => "RunExists",
            Error::Variant { .. } => "Variant",
            Error::Usage(_) => "Usage",
            Error::Config(c) => match c {
                ConfigError::UnknownKey(_) => "UnknownKey",
                ConfigError::TypeError { .. } => "TypeError",
                ConfigError::MissingFile(_) => "MissingFile",
                _ => "Config",
            },
            Error::Fixture(_) => "InvalidArgument",
            Error::Curation(_) => "Curation",
            Error::Prompt(_) => "Prompt",
            Error::Annotate(_) => "Annotate",
            Error::Model(_) => "Model",
            Error::Dfn(_) => "Dfn",
            Error::Train(_) => "Train",
            Error::Metrics(_) => "Metrics",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}
