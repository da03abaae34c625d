use std::path::PathBuf;

use mmcd_model::ModelError;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_OTHER: i32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] mmcd_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => EXIT_CONFIG,
            HarnessError::Numeric(_) => EXIT_NUMERIC,
            HarnessError::Model(ModelError::Config(_)) => EXIT_CONFIG,
            HarnessError::Model(ModelError::NonFinite(_)) => EXIT_NUMERIC,
            HarnessError::Model(ModelError::Data(e)) | HarnessError::Data(e) => match e {
                mmcd_core::Error::InvalidConfig(_) | mmcd_core::Error::Json { .. } => EXIT_CONFIG,
                _ => EXIT_OTHER,
            },
            _ => EXIT_OTHER,
        }
    }
}
