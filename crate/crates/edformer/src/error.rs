//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid axis {axis} for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },

    #[error("{ctx}: non-finite value encountered")]
    NonFinite { ctx: &'static str },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    LossNotScalar { shape: Vec<usize> },

    #[error("node does not belong to this tape")]
    NotOnTape,

    #[error("backward already ran on this tape; record a fresh tape")]
    TapeConsumed,

    #[error("decomposition kernel must be odd, got {kernel}")]
    EvenKernel { kernel: usize },

    #[error("empty series")]
    EmptySeries,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown config key `{key}` in {path}")]
    UnknownConfigKey { key: String, path: String },

    #[error("dataset file not found: {}", path.display())]
    MissingDataset { path: PathBuf },

    #[error("CSV parse error at row {row}, column {col}: cannot parse `{cell}` as a number")]
    CsvCell { row: usize, col: usize, cell: String },

    #[error("CSV row {row} has {got} fields, expected {expected}")]
    CsvRagged { row: usize, got: usize, expected: usize },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("split `{name}` has {len} rows, need at least {min} (lookback + horizon)")]
    SplitTooShort { name: &'static str, len: usize, min: usize },

    #[error("checkpoint has bad magic (not an EDF1 file)")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("checkpoint file is truncated")]
    TruncatedCheckpoint,

    #[error("loss became non-finite at step {step} (batch {batch})")]
    NanLoss { step: usize, batch: usize },

    #[error("unknown attribution method `{0}` (expected fa, fo, ig, gs, or winit)")]
    UnknownMethod(String),

    #[error("input has {got} rows, need at least the lookback length {need}")]
    TooFewRows { got: usize, need: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by user configuration rather than runtime
    /// failure; the CLI maps these to exit code 2.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::UnknownConfigKey { .. }
                | Error::MissingDataset { .. }
                | Error::UnknownMethod(_)
                | Error::EvenKernel { .. }
        )
    }
}
