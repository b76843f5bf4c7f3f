use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain space: {0}")]
    InvalidDomain(String),
    #[error("unknown dimension `{0}`")]
    UnknownDimension(String),
    #[error("{n_parts} sub-domains cannot be tiled as an integer grid over {dims} dimensions")]
    NonFactorableGrid { n_parts: usize, dims: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("parameter `{name}` = {value} lies outside the full domain [{lo}, {hi}]")]
    OutOfDomain { name: String, value: f64, lo: f64, hi: f64 },
    #[error("step called on a finished episode")]
    StepAfterDone,
    #[error("episode has {got} steps, expected {expected}")]
    IncompleteEpisode { got: usize, expected: usize },
    #[error("shape mismatch: expected {expected} columns, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("loss node is {rows}x{cols}, expected a scalar")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("non-finite gradient in `{0}`; step skipped")]
    NonFiniteGradient(String),
    #[error("non-finite loss in {0}; step skipped")]
    NonFiniteLoss(&'static str),
    #[error("gradient check failed: max relative error {max_rel_err:.3e} exceeds {tolerance:.1e}")]
    GradientCheck { max_rel_err: f64, tolerance: f64 },
    #[error("standard deviation must be positive, got {0}")]
    NonPositiveStd(f64),
    #[error("replay buffer holds {len} records, batch of {batch} requested")]
    UnderfullBuffer { len: usize, batch: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("mixture rate {0} outside [0, 1]")]
    MixtureRateOutOfRange(f64),
    #[error("at least one sub-domain is required")]
    NoSubDomains,
    #[error("schedule cursor overrun at visit {0}")]
    CursorOverrun(usize),
    #[error("local policy {0} has not been trained")]
    UntrainedLocal(usize),
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("metrics: {0}")]
    Metrics(String),
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
    #[error("singular Bellman system")]
    SingularSystem,
    #[error("run diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
