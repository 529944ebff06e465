use thiserror::Error;

/// Errors produced by the training laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token id {id} is outside the vocabulary (size {vocab_size})")]
    UnknownToken { id: u32, vocab_size: usize },

    #[error("prompt must be nonempty")]
    EmptyPrompt,

    #[error("advantage group needs at least 2 members, got {0}")]
    DegenerateGroup(usize),

    #[error("retention proportion {0} is outside (0, 1]")]
    EtaOutOfRange(f64),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("numerical failure at step {step}: {detail}")]
    StepFailed { step: usize, detail: String },

    #[error("step batch is empty")]
    EmptyBatch,

    #[error("validation set is empty")]
    EmptyValidation,

    #[error("proportion of optimized tokens is zero")]
    ZeroPot,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error(
        "probe collection shortfall on instance {instance_id}: wanted {wanted_correct} correct / \
         {wanted_incorrect} incorrect, collected {got_correct} / {got_incorrect} in {attempts} attempts"
    )]
    ProbeShortfall {
        instance_id: u64,
        wanted_correct: usize,
        wanted_incorrect: usize,
        got_correct: usize,
        got_incorrect: usize,
        attempts: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
