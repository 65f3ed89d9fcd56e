use thiserror::Error;

pub type Result<T, E = EbmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum EbmError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("node {0} is not on this tape")]
    Lookup(usize),

    #[error("label error: {0}")]
    Label(String),

    #[error("chain diverged at step {step}")]
    ChainDiverged { step: usize },

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("taped chain of {requested} steps exceeds the limit of {limit}")]
    TapeDepth { requested: usize, limit: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("degenerate estimate: {0}")]
    Degenerate(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl EbmError {
    /// Stable, machine-parseable category name.
    pub fn category(&self) -> &'static str {
        match self {
            EbmError::Dimension(_) => "dimension",
            EbmError::Contract(_) => "contract",
            EbmError::Lookup(_) => "lookup",
            EbmError::Label(_) => "label",
            EbmError::ChainDiverged { .. } => "chain-diverged",
            EbmError::TrainingDiverged(_) => "training-diverged",
            EbmError::TapeDepth { .. } => "tape-depth",
            EbmError::Unsupported(_) => "unsupported",
            EbmError::Degenerate(_) => "degenerate",
            EbmError::EmptyInput(_) => "empty-input",
            EbmError::Config(_) => "config",
            EbmError::Format(_) => "format",
            EbmError::Io(_) => "io",
        }
    }
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(EbmError::Dimension(msg.into()))
}
