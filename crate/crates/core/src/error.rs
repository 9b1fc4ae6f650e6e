use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unmappable character {ch:?} at position {position}")]
    UnmappableCharacter { position: usize, ch: char },
    #[error("token id {0} is not a printable character")]
    UnknownToken(u32),
    #[error("image dimension {dim} not divisible by patch size {patch}")]
    DimensionNotDivisible { dim: usize, patch: usize },
    #[error("invalid number of diffusion steps: {0}")]
    InvalidT(usize),
    #[error("invalid schedule offset: {0}")]
    InvalidOffset(f64),
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },
    #[error("timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("timestep order violated: t_prev={t_prev} must be < t={t}")]
    TimestepOrder { t: usize, t_prev: usize },
    #[error("embedding dimension {0} must be even")]
    OddDim(usize),
    #[error("U-Net decode requires the skip tensors captured by encode")]
    MissingSkips,
    #[error("expected {expected} patch vectors, got {actual}")]
    CountMismatch { expected: usize, actual: usize },
    #[error("image spans overlap at element {0}")]
    OverlappingSpans(usize),
    #[error("image span ({start}, {len}) out of bounds for length {total}")]
    SpanOutOfBounds { start: usize, len: usize, total: usize },
    #[error("mask length {mask} does not match sequence length {sequence}")]
    LayoutMaskMismatch { mask: usize, sequence: usize },
    #[error("malformed sequence: {0}")]
    MalformedSequence(String),
    #[error("non-finite loss at step {step}: lm={lm} ddpm={ddpm}")]
    NonFiniteLoss { step: usize, lm: f64, ddpm: f64 },
    #[error("generation prefix must end with BOI")]
    PrefixNotAtBoi,
    #[error("unparseable caption {0:?}")]
    UnparseableCaption(String),
    #[error("unknown edit instruction {0:?}")]
    UnknownInstruction(String),
    #[error("need at least {needed} distinct patches, found {found}")]
    InsufficientData { needed: usize, found: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("empty evaluation set")]
    EmptyEvalSet,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
