use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// Backward call without a matching, unconsumed forward call.
    #[error("forward/backward handshake violated: {0}")]
    Handshake(&'static str),

    #[error("degenerate input: standard deviation {sigma:e} is below the floor {floor:e}")]
    Degenerate { sigma: f64, floor: f64 },

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("idx: bad magic number {found:#010x} (expected {expected:#010x})")]
    IdxBadMagic { found: u32, expected: u32 },

    #[error("idx: file truncated (need {needed} bytes, have {have})")]
    IdxTruncated { needed: usize, have: usize },

    #[error("idx: {images} images but {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("state record: {0}")]
    Decode(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(what: impl Into<String>) -> Error {
    Error::Shape(what.into())
}
