use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("softmax row {row} has no valid positions")]
    DegenerateRow { row: usize },

    #[error("masked cross-entropy called with an empty position set")]
    EmptyMask,

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    VocabId { id: usize, vocab_size: usize },

    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("loss function is not deterministic: two evaluations differ ({a} vs {b})")]
    NonDeterministic { a: f64, b: f64 },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corpus ingestion failed: {0}")]
    Ingestion(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint incompatible with inputs: {0}")]
    Incompatible(String),

    #[error("probe generation error: missing template tokens in vocab: {0:?}")]
    MissingTemplateTokens(Vec<String>),

    #[error("probe dataset parse error at line {line}: {detail}")]
    ProbeParse { line: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
