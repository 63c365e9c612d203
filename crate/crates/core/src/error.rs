use thiserror::Error;

use crate::training::TrainHistory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("backward() requires a 1x1 loss, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("cosine kernel: row {row} has zero norm")]
    ZeroVector { row: usize },
    #[error("k = {k} exceeds n - 1 for n = {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("graph mixing needs {0}")]
    MissingGraph(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid model spec: {0}")]
    SpecInvalid(String),
    #[error("loss mask selects no rows")]
    EmptyMask,
    #[error("label {label} at row {row} is outside [0, {classes})")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("no observed events")]
    NoEvents,
    #[error("training diverged at epoch {epoch} (loss is not finite)")]
    Diverged {
        epoch: usize,
        history: Box<TrainHistory>,
    },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("affinity matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("node {0} has zero degree")]
    DegenerateDegree(usize),
    #[error("no comparable pairs for concordance")]
    NoComparablePairs,
    #[error("group {0} is empty")]
    EmptyGroup(usize),
    #[error("bad group proportions: {0}")]
    BadProportions(String),
    #[error("ragged table: line {line} has {found} fields, expected {expected}")]
    Ragged {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-numeric value {value:?} at row {row}, column {column}")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("missing value at row {row}, column {column}")]
    MissingValue { row: usize, column: String },
    #[error("table is empty")]
    EmptyTable,
    #[error("cannot select {m} of {p} features")]
    MTooLarge { m: usize, p: usize },
    #[error("class {0} has no members")]
    ClassTooSmall(usize),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
