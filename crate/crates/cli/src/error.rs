use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    ArrayIo(#[from] rsfr_core::array_io::ArrayIoError),
    #[error(transparent)]
    Dataset(#[from] rsfr_core::dataset::DatasetError),
    #[error(transparent)]
    KSpace(#[from] rsfr_core::kspace::KSpaceError),
    #[error(transparent)]
    DtFit(#[from] rsfr_core::dtfit::DtFitError),
    #[error(transparent)]
    Metrics(#[from] rsfr_core::metrics::MetricsError),
    #[error(transparent)]
    Semantics(#[from] rsfr_core::semantics::SemanticsError),
    #[error(transparent)]
    Model(#[from] rsfr_net::model::ModelError),
    #[error(transparent)]
    Train(#[from] rsfr_net::train::TrainError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("plot: {0}")]
    Plot(String),
    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),
    #[error("stage {stage}: missing input {what}")]
    MissingInput { stage: String, what: String },
    #[error("stage {stage} failed: {message}")]
    StageFailed { stage: String, message: String },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|e| CliError::io(path, e))
    }
}
