use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // corpus
    #[error("empty narration track")]
    EmptyTrack,
    #[error("no narration track with at least two entries")]
    NoQualifyingTrack,
    #[error("alpha must be positive, got {0}")]
    InvalidAlpha(f64),
    #[error("invalid narration track {video_id}: {reason}")]
    InvalidTrack { video_id: String, reason: String },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("instruction bank needs 10 distinct strings, template yields {0}")]
    TooFewInstructions(usize),

    // synthetic world
    #[error("infeasible world config: {0}")]
    InfeasibleConfig(String),
    #[error("empty program")]
    EmptyProgram,
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    InvalidRatios([f64; 3]),

    // models
    #[error("view mismatch: encoder expects {expected}, frames are {actual}")]
    ViewMismatch { expected: String, actual: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("token id {id} is outside the vocabulary of {vocab}")]
    OutOfVocabulary { id: usize, vocab: usize },
    #[error("LoRA target patterns {0:?} match no weight matrix")]
    NoLoraTarget(Vec<String>),
    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    // losses
    #[error("no supervised positions")]
    NoSupervisedPositions,
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("active loss `{0}` is missing its inputs")]
    MissingLossInput(&'static str),

    // trainer
    #[error("parameters both trainable and frozen: {0:?}")]
    FreezeOverlap(Vec<String>),
    #[error("parameters neither trainable nor frozen: {0:?}")]
    FreezeUncovered(Vec<String>),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("training diverged at step {step}: non-finite total loss")]
    Diverged { step: usize },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("stage {stage} requires completed stage {missing}")]
    Lineage { stage: String, missing: String },
    #[error("frozen parameters changed during stage {0}")]
    FreezeViolated(String),
    #[error("unknown {kind} `{value}`")]
    Unknown { kind: &'static str, value: String },

    // evaluation
    #[error("candidate pool too small: need {need} distinct non-candidate strings, have {have}")]
    InsufficientPool { need: usize, have: usize },
    #[error("missing predictions for items {0:?}")]
    MissingPredictions(Vec<String>),
    #[error("query {0} has no relevant item")]
    NoRelevant(usize),
    #[error("ideal gains are all zero")]
    ZeroIdeal,
    #[error("unsupported task type `{0}`")]
    UnsupportedTask(String),
    #[error("invalid eval item {id}: {reason}")]
    InvalidItem { id: String, reason: String },

    #[error("malformed array file {path}: {reason}")]
    ArrayFormat { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by an internal invariant rather than bad input.
    pub fn is_internal(&self) -> bool {
        matches!(
            self,
            Error::FreezeViolated(_) | Error::NonFiniteGradient(_) | Error::Diverged { .. }
        )
    }
}
