//! Crate-wide error type.

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape or rank mismatch between tensors.
    #[error("shape error: {0}")]
    Shape(String),

    /// A library operation produced (or was handed) a NaN or infinity.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Softmax over an attention row whose keys are all masked out.
    #[error("degenerate mask: attention row has no unmasked keys")]
    DegenerateMask,

    /// An attention column carries no mass, so a mass ratio is undefined.
    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),

    /// No grid column/row is covered by any corner mask.
    #[error("degenerate corner support: {0}")]
    DegenerateCorner(String),

    /// `Tape::backward` called twice without a reset.
    #[error("backward already run on this tape; reset it first")]
    BackwardAlreadyRun,

    /// Invalid argument or configuration value.
    #[error("invalid input: {0}")]
    Input(String),

    /// Configuration file problem (unknown key, bad value, unreadable file).
    #[error("config error: {0}")]
    Config(String),

    /// Dataset or request file problem.
    #[error("data error: {0}")]
    Data(String),

    /// Annotation / request parse failure, with the offending line when known.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Vocabulary lookup failure.
    #[error("vocabulary error: unknown word {0:?}")]
    Vocabulary(String),

    /// Scene placement failed after the rejection-sampling attempt budget.
    #[error("generation retry budget exhausted: {0}")]
    GenerationRetry(String),

    /// Training loss became non-finite.
    #[error("training divergence: {0}")]
    TrainingDivergence(String),

    /// Guided update produced a non-finite gradient.
    #[error("guidance divergence: {0}")]
    GuidanceDivergence(String),

    /// Checkpoint container is malformed or fails its content hash.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}
