use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("missing value at row {row}, column {column}")]
    MissingValue { row: usize, column: String },

    #[error("non-positive price {value} at row {row}, column {column}")]
    NonPositivePrice {
        row: usize,
        column: String,
        value: f64,
    },

    #[error("non-increasing dates at row {row}: {date}")]
    NonIncreasingDates { row: usize, date: String },

    #[error("insufficient history: need {needed} rows, have {available}")]
    InsufficientHistory { needed: usize, available: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("correlation matrix is not positive semi-definite")]
    NotPositiveSemidefinite,

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("degenerate series: zero variance")]
    DegenerateSeries,

    #[error("undefined downside deviation: no negative returns")]
    UndefinedDownside,

    #[error("degenerate loss: zero in-batch variance")]
    DegenerateLoss,

    #[error("degenerate asset {0}: zero variance")]
    DegenerateAsset(usize),

    #[error("degenerate groups: zero pooled variance")]
    DegenerateGroups,

    #[error("fold unusable: {rows} training rows left, need at least {needed}")]
    FoldUnusable { rows: usize, needed: usize },

    #[error("training aborted at epoch {epoch}: every batch was degenerate")]
    AllBatchesDegenerate { epoch: usize },

    #[error("allocator {method} failed on split {split}: {source}")]
    Allocator {
        method: String,
        split: usize,
        #[source]
        source: Box<Error>,
    },
}
