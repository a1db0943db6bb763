use alloc::boxed::Box;
use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A vector (or matrix row) whose norm is too small to normalize.
    #[error("degenerate vector{}: norm {norm:e} is below the threshold", row.map(|r| alloc::format!(" at row {r}")).unwrap_or_default())]
    DegenerateVector { row: Option<usize>, norm: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch { context: &'static str, expected: usize, found: usize },

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("class {class} has {count} samples, need at least {needed}")]
    TooFewSamples { class: usize, count: usize, needed: usize },

    #[error("index out of range: {what} = {index}, bound {bound}")]
    IndexOutOfRange { what: &'static str, index: usize, bound: usize },

    #[error("missing group labels: {0}")]
    MissingGroupLabels(String),

    #[error("non-finite loss {value} at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize, value: f64 },

    #[error("training failed at epoch {epoch}, step {step}: {source}")]
    Training { epoch: usize, step: usize, source: Box<Error> },

    #[error("empty input")]
    EmptyInput,

    #[error("group {0} has no samples")]
    EmptyGroup(String),

    #[error("need at least two groups with samples, found {0}")]
    DegenerateGroups(usize),

    #[error("maximum group accuracy is zero")]
    ZeroMaxAccuracy,

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
}
