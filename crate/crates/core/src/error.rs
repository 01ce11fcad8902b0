use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input contains no words")]
    EmptyInput,
    #[error("no glyph for U+{0:04X}")]
    GlyphMissing(u32),
    #[error("font backend: {0}")]
    BackendError(String),
    #[error("sequence too long: {actual} > {limit}")]
    SequenceTooLong { actual: usize, limit: usize },
    #[error("positional id {id} exceeds table size {size}")]
    PositionOverflow { id: usize, size: usize },
    #[error("non-finite value in {0}")]
    NumericalError(String),
    #[error("unknown token id {0}")]
    UnknownToken(usize),
    #[error("loss mask selects no positions")]
    EmptyLossMask,
    #[error("BPE target size {0} must exceed 256")]
    InvalidTarget(usize),
    #[error("step {step} outside [0, {total}]")]
    InvalidStep { step: usize, total: usize },
    #[error("column {0} has zero norm")]
    DegenerateColumn(usize),
    #[error("alignment loss needs at least one pair")]
    EmptyAlignment,
    #[error("training diverged at step {step}")]
    Divergence { step: usize },
    #[error("reference is empty")]
    EmptyReference,
    #[error("corpus has no words")]
    EmptyCorpus,
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("line {0}: missing tab separator")]
    MissingTab(usize),
    #[error("line {0}: empty field")]
    EmptyField(usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
