use std::path::PathBuf;

use thiserror::Error;

use crate::data::Modality;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the engine can report.
///
/// Variants are grouped by the CLI exit code they map to (see
/// [`Error::exit_code`]): usage problems, data/format problems, and numeric
/// failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("line {line}: {message}: {text:?}")]
    Parse {
        line: usize,
        text: String,
        message: String,
    },

    #[error("line {line}: rating out of range [1, 5]: {rating}")]
    RatingOutOfRange { line: usize, rating: f64 },

    #[error("line {line}: duplicate rating for pair (user {user:?}, item {item:?})")]
    DuplicatePair {
        line: usize,
        user: String,
        item: String,
    },

    #[error("feature file: {0}")]
    FeatureFormat(String),

    #[error("feature file: entity {entity:?}: {message}")]
    FeatureEntity { entity: String, message: String },

    #[error("missing {modality} features for {total} entities (first: {})", .entities.join(", "))]
    MissingFeature {
        modality: Modality,
        entities: Vec<String>,
        total: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("report: {0}")]
    Report(String),

    #[error("empty data: {0}")]
    EmptyData(String),

    #[error("no users with relevant test items; ranking metrics undefined")]
    NoScoredUsers,

    #[error("forward cache is stale (cache version {cache}, model version {model})")]
    StaleCache { cache: u64, model: u64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("fold {index}: {source}")]
    Fold {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("row {name}: {source}")]
    Row {
        name: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            actual,
        }
    }

    /// CLI exit code: 1 usage, 2 data/format, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config { .. } => 1,
            Error::NonFinite(_) | Error::Divergence(_) => 3,
            Error::Fold { source, .. } | Error::Row { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}
