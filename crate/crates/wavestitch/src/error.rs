use thiserror::Error;

/// Crate-wide error type. Variants are grouped by the subsystem that raises
/// them so callers (notably the CLI) can map them to exit classes.
#[derive(Debug, Error)]
pub enum Error {
    // ── tensor / graph ───────────────────────────────────────────────
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("tensor: shape {shape:?} does not hold {len} values")]
    ShapeLenMismatch { shape: Vec<usize>, len: usize },
    #[error("graph: node {0} does not exist")]
    UnknownNode(usize),
    #[error("graph: node {0} is a constant; gradients are never produced for constants")]
    GradOfConstant(usize),
    #[error("graph: backward requires a scalar terminal node, got shape {shape:?}")]
    TerminalNotScalar { shape: Vec<usize> },
    #[error("graph: {0}")]
    Graph(String),
    #[error("parameter store: unknown parameter `{0}`")]
    UnknownParameter(String),

    // ── schedule ─────────────────────────────────────────────────────
    #[error("schedule: endpoints must satisfy 0 < alpha_last <= alpha_first < 1, got ({first}, {last})")]
    BadScheduleEndpoints { first: f64, last: f64 },
    #[error("schedule: diffusion step {t} out of range 1..={max}")]
    StepOutOfRange { t: usize, max: usize },

    // ── encoding ─────────────────────────────────────────────────────
    #[error("encoding: category index {index} out of range for cardinality {cardinality}")]
    CategoryOutOfRange { index: usize, cardinality: usize },
    #[error("encoding: unseen category `{value}` in column `{column}`")]
    UnseenCategory { column: String, value: String },
    #[error("encoding: cannot fit scaler on an empty training split")]
    EmptyTrainingSplit,

    // ── dataset ──────────────────────────────────────────────────────
    #[error("dataset: column `{0}` missing from CSV header")]
    MissingColumn(String),
    #[error("dataset: row {row}, column `{column}`: {reason}")]
    BadCell {
        row: usize,
        column: String,
        reason: String,
    },
    #[error("dataset: root value `{0}` does not occur in the root column")]
    RootValueAbsent(String),
    #[error("dataset: splitting on `{0}` leaves an empty training split")]
    EmptyTrainAfterSplit(String),
    #[error("dataset: condition has {got} entries but the dataset has {expected} metadata columns")]
    ConditionLength { got: usize, expected: usize },
    #[error("windows: width {w} exceeds sequence length {m}")]
    WindowTooWide { w: usize, m: usize },
    #[error("windows: stride {s} exceeds width {w}; timesteps would be left uncovered")]
    StrideTooLarge { s: usize, w: usize },
    #[error("windows: {0}")]
    Window(String),

    // ── denoiser / sampler ───────────────────────────────────────────
    #[error("training: non-finite loss at epoch {epoch}, minibatch {minibatch} (last finite epoch loss {last_loss:?})")]
    NonFiniteLoss {
        epoch: usize,
        minibatch: usize,
        last_loss: Option<f64>,
    },
    #[error("sampler: non-finite gradient at diffusion step {t}, window {window}")]
    NonFiniteGradient { t: usize, window: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    // ── metrics ──────────────────────────────────────────────────────
    #[error("metrics: mask selects no entries; nothing to score")]
    EmptyMask,
    #[error("metrics: lag {lag} out of range 1..{m}")]
    LagOutOfRange { lag: usize, m: usize },
    #[error("metrics: cross-feature correlation needs at least 2 channels, got {0}")]
    TooFewChannels(usize),

    // ── config / io ──────────────────────────────────────────────────
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical kind (NaN/Inf surfaced somewhere).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::NonFiniteLoss { .. }
                | Error::NonFiniteGradient { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
