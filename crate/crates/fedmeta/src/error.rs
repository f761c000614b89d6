use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or arguments that violate a documented precondition.
    #[error("config error: {0}")]
    Config(String),

    /// Non-finite values produced where finite numbers are required.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Malformed client payloads or inconsistent server-side bookkeeping.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Structurally invalid input data.
    #[error("data error: {0}")]
    Ingestion(String),

    /// Client cannot be split into non-empty support and query sets.
    #[error("client {client_id} has too few records to split ({n})")]
    ClientTooSmall { client_id: String, n: usize },

    /// No clients survived filtering.
    #[error("dataset has no clients left")]
    EmptyDataset,

    /// Accuracy requested over zero data points.
    #[error("accuracy undefined: no evaluated data points")]
    UndefinedAccuracy,

    #[error("config parse error: {0}")]
    ConfigParse(#[from] toml::de::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors the command line reports as bad configuration
    /// rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::ConfigParse(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
