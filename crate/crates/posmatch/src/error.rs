use std::path::PathBuf;

/// Result alias for the file-format and harness layer.
pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised while reading or writing artifacts and running experiments.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] posmatch_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Toml {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("row {row}, column `{column}`: {reason}")]
    BadValue { row: usize, column: String, reason: String },

    #[error("{0}: file has no data rows")]
    EmptyFile(PathBuf),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{failed} of {total} experiment cells failed")]
    PartialFailure { failed: usize, total: usize },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    /// Process exit code for this error: 2 for configuration and validation
    /// problems, 3 for failures during training, 4 for partial experiment
    /// failure.
    pub fn exit_code(&self) -> i32 {
        use posmatch_core::Error as E;
        match self {
            Error::PartialFailure { .. } => 4,
            Error::Core(E::Training { .. } | E::NonFiniteLoss { .. }) => 3,
            _ => 2,
        }
    }
}
