use thiserror::Error;

/// Errors raised anywhere in the estimation stack.
#[derive(Debug, Error)]
pub enum CdrfError {
    #[error("{message} at row {row}, column {column}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("empty source set: {0}")]
    EmptySourceSet(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CdrfError>,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, CdrfError>;

impl CdrfError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CdrfError::InvalidInput(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        CdrfError::Numeric(msg.into())
    }

    /// Root cause with stage labels stripped.
    pub fn root(&self) -> &CdrfError {
        match self {
            CdrfError::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code: 2 usage, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            CdrfError::Config(_) | CdrfError::InvalidInput(_) => 2,
            CdrfError::Numeric(_) => 4,
            _ => 3,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| CdrfError::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
