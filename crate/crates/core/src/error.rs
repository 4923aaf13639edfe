use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite log posterior in chain {chain} at iteration {iteration}; state dumped to {dump}")]
    NonFinite {
        chain: usize,
        iteration: usize,
        dump: String,
    },
    #[error("missing covariate cell for country `{country}` year {year}")]
    MissingCovariate { country: String, year: i32 },
    #[error("missing population cell for country `{country}` year {year} age group {age}")]
    MissingPopulation {
        country: String,
        year: i32,
        age: String,
    },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// Ingestion failure with the offending file and (1-based) data line when known.
#[derive(Debug, Error)]
#[error("{}{}: {kind}", path.display(), line.map(|l| format!(":{l}")).unwrap_or_default())]
pub struct IngestError {
    pub path: PathBuf,
    pub line: Option<u64>,
    pub kind: IngestErrorKind,
}

impl IngestError {
    pub fn new(path: &Path, line: Option<u64>, kind: IngestErrorKind) -> Self {
        Self {
            path: path.to_path_buf(),
            line,
            kind,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IngestErrorKind {
    #[error("file has no data rows")]
    EmptyFile,
    #[error("header mismatch: expected `{expected}`, found `{found}`")]
    Header { expected: String, found: String },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("orphan entry: `{0}` has no parent")]
    OrphanId(String),
    #[error("`{child}` assigned to both `{first}` and `{second}`")]
    ConflictingParent {
        child: String,
        first: String,
        second: String,
    },
    #[error("unknown country `{0}`")]
    UnknownCountry(String),
    #[error("year {year} outside window [{min}, {max}]")]
    YearOutOfWindow { year: i32, min: i32, max: i32 },
    #[error("sample size must be >= 1, found {0}")]
    SampleSize(i64),
    #[error("sample sd must be > 0, found {0}")]
    NonPositiveSd(f64),
    #[error("invalid age range {lo}-{hi}")]
    AgeRange { lo: f64, hi: f64 },
    #[error("invalid value for `{field}`: {value}")]
    InvalidValue { field: String, value: String },
    #[error("study `{study}` has inconsistent `{field}` across rows")]
    InconsistentStudy { study: String, field: String },
    #[error("missing covariate cell for country `{country}` year {year}")]
    MissingCovariate { country: String, year: i32 },
    #[error("duplicate cell for `{0}`")]
    DuplicateCell(String),
    #[error("standard population weights sum to {0}, expected 1")]
    StandardWeights(f64),
    #[error("missing population cell for country `{country}` year {year} ages {age}")]
    MissingPopulation {
        country: String,
        year: i32,
        age: String,
    },
    #[error("csv: {0}")]
    Csv(String),
    #[error("io: {0}")]
    Io(String),
}
