use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid coordinate: lat {lat}, lon {lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },
    #[error("invalid kinematic state: {0}")]
    InvalidState(String),
    #[error("bearing undefined between coincident points")]
    CoincidentPoints,
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("no valid rows in input ({skipped} skipped)")]
    EmptyInput { skipped: usize },
    #[error("segment too short to resample: {0} point(s)")]
    TooShort(usize),
    #[error("variable `{0}` has max = min over the training split")]
    DegenerateVariable(&'static str),
    #[error("hash mismatch for {path}: manifest {expected}, found {found}")]
    HashMismatch {
        path: String,
        expected: String,
        found: String,
    },
    #[error("anomaly span {start}..{end} outside window of {len} steps")]
    SpanOutOfBounds { start: usize, end: usize, len: usize },
    #[error("invalid anomaly spec: {0}")]
    InvalidSpec(String),
    #[error("prompt of {0} bytes exceeds 2048")]
    PromptTooLong(usize),
    #[error("sequence of {0} tokens exceeds the maximum of {1}")]
    SequenceTooLong(usize, usize),
    #[error("template slot `{0}` has no value")]
    MissingSlot(&'static str),
    #[error("loss mask selects no positions")]
    EmptyMask,
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed data file: {0}")]
    Format(String),
    #[error(transparent)]
    Diff(#[from] diffcore::DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
