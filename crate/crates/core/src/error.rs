use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised anywhere in the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("trainable parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid prompt: {0}")]
    Prompt(String),
    #[error("insufficient pixels: need {needed} {kind} pixels, mask has {available}")]
    InsufficientPixels {
        kind: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("frozen weights changed: expected hash {expected}, found {found}")]
    FrozenHashViolation { expected: String, found: String },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}
