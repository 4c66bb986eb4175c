use std::path::PathBuf;

use thiserror::Error;

/// Every failure the toolkit can report. Variants carry enough context to
/// name the offending input (ticker, factor, column) without a backtrace.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("empty universe: no ticker survived cleaning")]
    EmptyUniverse,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate factor `{0}`: zero cross-sectional standard deviation")]
    DegenerateFactor(String),

    #[error("degenerate series: {0}")]
    DegenerateSeries(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("fit failure: {0}")]
    FitFailure(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
