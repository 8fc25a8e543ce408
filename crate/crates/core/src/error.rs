use thiserror::Error;

pub type Result<T, E = SwapError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SwapError {
    #[error("prompt has {tokens} tokens, backend limit is {limit}")]
    TokenLimitExceeded { tokens: usize, limit: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("timestep {t} outside [0, {t_max})")]
    Timestep { t: usize, t_max: usize },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("saliency map is constant; cannot localize concept")]
    DegenerateAttention,

    #[error("thresholded mask has no foreground points")]
    EmptyMask,

    #[error("prompt error: {0}")]
    Prompt(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("backend does not support {0}")]
    UnsupportedBackend(String),

    #[error("non-finite gradient at step {step}")]
    Numerical { step: usize },

    #[error("no image-text scorer configured")]
    ScorerUnavailable,

    #[error("benchmark layout: {0}")]
    Layout(String),

    #[error("backend: {0}")]
    Backend(String),

    #[error("stage {index} failed: {source}")]
    Stage {
        index: usize,
        #[source]
        source: Box<SwapError>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl SwapError {
    /// Stable variant name, used on the diagnostic stream by the CLI.
    pub fn name(&self) -> &'static str {
        match self {
            SwapError::TokenLimitExceeded { .. } => "TokenLimitExceeded",
            SwapError::Shape(_) => "ShapeError",
            SwapError::Timestep { .. } => "TimestepError",
            SwapError::Param(_) => "ParamError",
            SwapError::DegenerateAttention => "DegenerateAttention",
            SwapError::EmptyMask => "EmptyMask",
            SwapError::Prompt(_) => "PromptError",
            SwapError::Contract(_) => "ContractError",
            SwapError::UnsupportedBackend(_) => "UnsupportedBackend",
            SwapError::Numerical { .. } => "NumericalError",
            SwapError::ScorerUnavailable => "ScorerUnavailable",
            SwapError::Layout(_) => "LayoutError",
            SwapError::Backend(_) => "BackendError",
            SwapError::Stage { source, .. } => source.name(),
            SwapError::Io { .. } => "IoError",
            SwapError::Image(_) => "ImageError",
            SwapError::Json(_) => "JsonError",
        }
    }

    /// Innermost error, looking through stage wrappers.
    pub fn root(&self) -> &SwapError {
        match self {
            SwapError::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        SwapError::Shape(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        SwapError::Param(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        SwapError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
