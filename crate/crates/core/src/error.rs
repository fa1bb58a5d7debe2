use std::path::PathBuf;

use crate::metric::MetricKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: line {line}: malformed row: {reason}")]
    MalformedRow {
        path: PathBuf,
        line: u64,
        reason: String,
    },
    #[error("duplicate sample for machine {machine_id}, metric {metric} at t={timestamp}")]
    DuplicateSample {
        machine_id: String,
        metric: MetricKind,
        timestamp: f64,
    },
    #[error("line {line}: unknown metric {name:?}")]
    UnknownMetric { line: u64, name: String },

    #[error("metric {metric} is carried by {found} machine(s); at least 2 are required")]
    TooFewMachines { metric: MetricKind, found: usize },
    #[error("machine streams for {metric} share no common time range")]
    EmptyOverlap { metric: MetricKind },
    #[error("tensor for {0} is already normalized")]
    AlreadyNormalized(MetricKind),
    #[error("window length {w} exceeds series length {len}")]
    WindowTooLong { w: usize, len: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("model is for {model}, window is {window}")]
    MetricMismatch { model: String, window: MetricKind },
    #[error("non-finite loss encountered (training diverged)")]
    NonFiniteLoss,
    #[error("no training windows supplied")]
    NoTrainingData,
    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("time index {index} out of range (series length {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("span {start}..{end} is not covered by tensor of length {len}")]
    SpanUncovered {
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("decision tree needs both classes in the dataset")]
    SingleClassDataset,

    #[error("embedding lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("window start {start} out of range (last valid start {last})")]
    WindowOutOfRange { start: usize, last: usize },
    #[error("verdict for window {got} arrived after window {last}")]
    OutOfOrderVerdict { last: usize, got: usize },
    #[error("no model for metric {0}")]
    MissingModel(MetricKind),
    #[error("tensors do not share a machine set and grid: {0}")]
    GridMismatch(String),

    #[error("fault profile out of bounds: {0}")]
    ProfileOutOfBounds(String),
    #[error("alert and ground-truth task sets differ: {0}")]
    TaskSetMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
