//! Error type shared across the crate.
//!
//! Variants are grouped into three classes so the CLI can map failures to
//! exit codes: configuration (2), data (3), numerical (4).

use thiserror::Error;

/// Failure class, used by the CLI for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    // --- configuration ---
    #[error("config error: {0}")]
    Config(String),

    // --- data / formats ---
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("format mismatch in {path}: {reason}")]
    FormatMismatch { path: String, reason: String },
    #[error("shape mismatch in {path}: header says {expected} values, payload has {found}")]
    ShapeMismatch {
        path: String,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value at row {row}, col {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("partition mismatch: expected {expected}, file says {found} (no override set)")]
    PartitionMismatch { expected: String, found: String },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate record at line {line}: (model={model}, layer={layer}, width={width}, l0={l0})")]
    DuplicateRecord {
        line: usize,
        model: String,
        layer: usize,
        width: u64,
        l0: f64,
    },
    #[error("non-positive loss at line {line}: {value}")]
    NonPositiveLoss { line: usize, value: f64 },
    #[error("stored aggregate differs from per-token arrays at line {line}: stored {stored}, computed {computed} ({which})")]
    AggregateMismatch {
        line: usize,
        which: String,
        stored: f64,
        computed: f64,
    },
    #[error("record at line {line} not in declared grid: {reason}")]
    UndeclaredRecord { line: usize, reason: String },
    #[error("fewer than {min} points survive norm trimming ({survivors})")]
    TooFewSurvivors { min: usize, survivors: usize },

    // --- numerics ---
    #[error("degenerate cloud: {excluded} of {total} points excluded from TWO-NN")]
    DegenerateCloud { excluded: usize, total: usize },
    #[error("zero-variance feature column {feature}")]
    ZeroVarianceFeature { feature: usize },
    #[error("non-positive 1st percentile in feature column {feature}: {value}")]
    NonPositivePercentile { feature: usize, value: f64 },
    #[error("all tokens trimmed")]
    AllTokensTrimmed,
    #[error("zero-norm input to cosine distance")]
    ZeroNorm,
    #[error("duplicate l0 knot: {value}")]
    DuplicateKnot { value: f64 },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("rank-deficient design: {0}")]
    RankDeficient(String),
    #[error("sparsity target {k} outside interpolation range [{lo}, {hi}]")]
    OutOfRange { k: f64, lo: f64, hi: f64 },
    #[error("insufficient grid after monotone filtering: {0}")]
    InsufficientGrid(String),
    #[error("floor fit failed: all starts diverged\n{trace}")]
    FitFailed { trace: String },
    #[error("singular design matrix: {0}")]
    SingularDesign(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            Config(_) => ErrorClass::Config,
            Io { .. } | FormatMismatch { .. } | ShapeMismatch { .. } | NonFiniteValue { .. }
            | PartitionMismatch { .. } | Parse { .. } | DuplicateRecord { .. }
            | NonPositiveLoss { .. } | AggregateMismatch { .. } | UndeclaredRecord { .. }
            | TooFewSurvivors { .. } => ErrorClass::Data,
            _ => ErrorClass::Numeric,
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
