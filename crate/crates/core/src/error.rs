use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty sequence library: {0}")]
    EmptyLibrary(String),

    #[error("csv input error at line {line}: {msg}")]
    CsvRow { line: usize, msg: String },

    #[error("unknown column `{0}` in csv input")]
    UnknownColumn(String),

    #[error("source `{source_name}`: {msg}")]
    SourceKind { source_name: String, msg: String },

    #[error("window mismatch: {0}")]
    Window(String),

    #[error("missing value inside a window (source {source_index}, block {block}, time {time})")]
    MissingInWindow {
        source_index: usize,
        block: usize,
        time: usize,
    },

    #[error("ill-conditioned past Gram matrix: {0}; increase the regularization")]
    IllConditioned(String),

    #[error("state {anchor} has no similarity mass (zero row in the state Gram matrix)")]
    IsolatedState { anchor: usize },

    #[error("eigensolver failure: {0}")]
    Eigen(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate local frame at frame {frame}: bond vectors are collinear")]
    DegenerateFrame { frame: usize },

    #[error("index out of range: {0}")]
    Index(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical pipeline, as opposed to bad input or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::IllConditioned(_) | Error::IsolatedState { .. } | Error::Eigen(_) | Error::DegenerateFrame { .. }
        )
    }
}
