use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised while loading a dataset directory.
#[derive(Debug, Error)]
pub enum LoadError {
    #[error("missing dataset file {0}")]
    MissingFile(PathBuf),
    #[error("{file}: expected {expected} bytes from meta.json, found {found}")]
    PayloadSize {
        file: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("sample {index} has label {label}, but the dataset has {n_classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: u32,
        n_classes: usize,
    },
    #[error("class {0} is listed as both seen and unseen")]
    OverlappingClasses(usize),
    #[error("sample {0} appears in more than one of train/test_seen/test_unseen")]
    OverlappingSamples(usize),
    #[error("malformed dataset: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Manifest(_) | Error::Json(_) => 2,
            Error::Load(_) | Error::Sampling(_) | Error::Io { .. } | Error::Csv(_) => 3,
            Error::Numeric(_) | Error::Degenerate(_) => 4,
            Error::Dimension(_) | Error::Contract(_) => 1,
        }
    }
}
