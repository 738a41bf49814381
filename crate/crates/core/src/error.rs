//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config field `{field}`: {constraint}")]
    ConfigInvalid { field: &'static str, constraint: String },

    #[error("directive wire is missing its motion frame (m_bos/m_eos)")]
    MissingFrame,

    #[error("directive wire opens a second motion frame before closing the first")]
    NestedFrame,

    #[error("directive wire has {0} trailing token(s) after m_eos")]
    TrailingTokens(usize),

    #[error("clip count mismatch: {audio} audio clip(s) vs {video} video clip(s)")]
    ClipCountMismatch { audio: usize, video: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("malformed delay grid: {0}")]
    MalformedGrid(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("reference latent is only permitted on the first clip (got clip index {0})")]
    RefOnLaterClip(u64),

    #[error("decode reached the length cap ({0}) before emitting m_eos")]
    DecodeOverflow(usize),

    #[error("too few clips: {got} provided, at least {need} required")]
    TooFewClips { got: usize, need: usize },

    #[error("stage order violation: {0}")]
    StageOrderViolation(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("invalid token: {0}")]
    InvalidToken(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("clip {index}: {source}")]
    AtClip {
        index: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Attach the clip index at which a generation error occurred.
    pub fn at_clip(self, index: u64) -> Error {
        Error::AtClip { index, source: Box::new(self) }
    }
}
