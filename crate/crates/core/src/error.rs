//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the obfuscation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A token id is outside the model vocabulary.
    #[error("invalid token id {id} for vocabulary of size {vocab_size}")]
    InvalidToken { id: u32, vocab_size: usize },

    /// Input text contains a raw chat-template delimiter.
    #[error("text collides with chat template delimiter {delimiter:?}")]
    TemplateCollision { delimiter: String },

    /// The assembled sequence does not fit the model context window.
    #[error("context overflow: need {needed} positions, model supports {max}")]
    ContextOverflow { needed: usize, max: usize },

    /// A sequence is too short for the requested operation.
    #[error("degenerate sequence: length {len}, need at least {min}")]
    DegenerateSequence { len: usize, min: usize },

    /// Non-finite values encountered during numerical computation.
    #[error("numeric error: {0}")]
    NumericError(String),

    /// No sample contributes any position to the requested loss window.
    #[error("empty loss window [{start}, {end}]: no sample target covers it")]
    EmptyWindow { start: usize, end: usize },

    /// The candidate vocabulary is empty after removing forbidden tokens.
    #[error("no candidate tokens available: all vocabulary ids forbidden")]
    NoCandidates,

    /// A serialized artifact failed structural validation.
    #[error("format error: {0}")]
    FormatError(String),

    /// A soft prompt is bound to a different embedding table than the model's.
    #[error("model mismatch: artifact fingerprint {artifact} != model fingerprint {model}")]
    ModelMismatch { artifact: String, model: String },

    /// A corpus record could not be ingested.
    #[error("ingest error at record {record}: {reason}")]
    IngestError { record: usize, reason: String },

    /// The corpus cannot be partitioned as requested.
    #[error("split error: {0}")]
    SplitError(String),

    /// A system-prompt spec violates its scenario requirements.
    #[error("invalid prompt spec: {0}")]
    InvalidSpec(String),

    /// An embedding provider failed to encode text.
    #[error("embedding provider error: {0}")]
    ProviderError(String),

    /// Experiment configuration is invalid or inconsistent.
    #[error("config error: {0}")]
    ConfigError(String),

    /// A cached artifact disagrees with freshly computed content for the same key.
    #[error("cache conflict for key {key}: stored content differs")]
    CacheConflict { key: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for CLI use: 2 for configuration/input problems,
    /// 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigError(_)
            | Error::InvalidSpec(_)
            | Error::FormatError(_)
            | Error::IngestError { .. }
            | Error::SplitError(_)
            | Error::ModelMismatch { .. }
            | Error::Json(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
