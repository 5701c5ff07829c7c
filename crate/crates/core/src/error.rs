use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty instance: label {0} does not occur in the label map")]
    EmptyInstance(u32),

    #[error("invalid bounding box: {0}")]
    InvalidBox(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("channel mismatch: model expects {expected} input channel(s), got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("feature cache was produced by a different model config (cache {cache:016x}, model {model:016x})")]
    CacheMismatch { cache: u64, model: u64 },

    #[error("negative weight {value} at pixel {index}")]
    NegativeWeight { index: usize, value: f32 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("no seeds")]
    NoSeeds,

    /// Pixels (x, y) that were marked both foreground and background.
    #[error("scribble conflict at pixels {0:?}")]
    ScribbleConflict(Vec<(usize, usize)>),

    #[error("pixel ({x}, {y}) outside {width}x{height} grid")]
    OutOfBounds { x: usize, y: usize, width: usize, height: usize },

    #[error("max-flow failure: {0}")]
    MaxFlow(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unsupported image: {0}")]
    UnsupportedImage(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format { what, detail: detail.into() }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteLoss { .. } | Error::NonFinite(_) | Error::MaxFlow(_)
        )
    }
}
