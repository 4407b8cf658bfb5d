//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A signal is constant (or nearly so) where variation is required.
    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),

    /// A slice request produced zero samples.
    #[error("empty slice: requested [{t0}, {t1}) on trace spanning [{span0}, {span1})")]
    EmptySlice {
        t0: f64,
        t1: f64,
        span0: f64,
        span1: f64,
    },

    /// A required signal is absent from the bundle or does not cover the span.
    #[error("missing signal: {0}")]
    MissingSignal(String),

    /// Input too short or otherwise unusable for a kernel.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Training labels contain a single class.
    #[error("single class: {0}")]
    SingleClass(String),

    /// Feature names or dimensions do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A model file failed to parse or has an unsupported schema.
    #[error("corrupt model {path}: {detail}")]
    CorruptModel { path: PathBuf, detail: String },

    /// Hypnogram contains no sleep epochs.
    #[error("zero sleep time: {0}")]
    ZeroSleep(String),

    /// Fewer subjects than folds.
    #[error("too few subjects: have {have}, need at least {need}")]
    TooFewSubjects { have: usize, need: usize },

    /// Feature matrix unusable for clustering.
    #[error("degenerate matrix: {0}")]
    DegenerateMatrix(String),

    /// Scores contain no positive labels.
    #[error("no positive labels present")]
    NoPositives,

    /// Too few values for the requested statistic.
    #[error("too few values: have {have}, need at least {need}")]
    TooFew { have: usize, need: usize },

    /// Pearson correlation undefined (zero variance on one side).
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    /// A data file failed to parse; names the file and 1-based line.
    #[error("parse error in {file}:{line}: {detail}")]
    Parse {
        file: PathBuf,
        line: usize,
        detail: String,
    },

    /// A recording was rejected at ingestion (gaps, span problems, ...).
    #[error("recording rejected: {0}")]
    RecordingRejected(String),

    /// Configuration invalid before any compute.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("io error on {path}: {source}")]
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

    /// Process exit code class: 1 = user/config error, 2 = data error, 3 = internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::TooFewSubjects { .. } => 1,
            Error::Parse { .. }
            | Error::Io { .. }
            | Error::MissingSignal(_)
            | Error::RecordingRejected(_)
            | Error::CorruptModel { .. }
            | Error::DegenerateSignal(_)
            | Error::ZeroSleep(_) => 2,
            _ => 3,
        }
    }
}
