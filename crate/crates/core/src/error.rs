use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate softmax row: every entry along axis {axis} is masked")]
    DegenerateRow { axis: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("degenerate scene {scene}: {reason}")]
    DegenerateScene { scene: u64, reason: String },

    #[error("schema error: missing required column `{column}` in {file}")]
    Schema { column: String, file: String },

    #[error("parse error in {file} at row {row}: {msg}")]
    Parse { file: String, row: usize, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("unsupported format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence { epoch: usize, batch: usize, detail: String },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-parsable category, used by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::DegenerateRow { .. } => "degenerate-row",
            Error::Parameter(_) => "parameter",
            Error::Contract(_) => "contract",
            Error::NonFinite(_) => "non-finite",
            Error::DegenerateScene { .. } => "degenerate-scene",
            Error::Schema { .. } => "schema",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::Corrupt(_) => "corrupt",
            Error::UnsupportedVersion { .. } => "unsupported-version",
            Error::NotFound(_) => "not-found",
            Error::Divergence { .. } => "divergence",
            Error::Invariant(_) => "invariant",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        }
    }
}
