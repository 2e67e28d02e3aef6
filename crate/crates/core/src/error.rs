use crate::schedule::TimestepInterval;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("schedule has no entries")]
    EmptySchedule,
    #[error("interval {interval} overlaps {other}")]
    Overlap {
        interval: TimestepInterval,
        other: TimestepInterval,
    },
    #[error("timesteps {interval} are not covered by any interval")]
    Gap { interval: TimestepInterval },
    #[error("invalid interval bounds: {0}")]
    BadInterval(String),
    #[error("step {t} is outside the schedule range (1..={total})")]
    StepOutOfRange { t: u32, total: u32 },
    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),
    #[error("cross-attention column for token {token} is identically zero")]
    DegenerateMap { token: usize },
    #[error("resolution mismatch: expected {expected}, found {found}")]
    ResolutionMismatch { expected: usize, found: usize },
    #[error("no captured layer at resolution {0}")]
    NoLayerAtResolution(usize),
    #[error("segment mask is empty")]
    EmptySegment,
    #[error("noun at token position {0} is not part of the segmentation legend")]
    UnknownNoun(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("embedding provider failed: {0}")]
    Provider(String),
    #[error("word {0:?} cannot be tokenized")]
    UnknownWord(String),
    #[error("backend failed: {0}")]
    Backend(String),
    #[error("hook failed at step {t}{}: {message}", layer.as_ref().map(|l| format!(", layer {l}")).unwrap_or_default())]
    Hook {
        t: u32,
        layer: Option<String>,
        message: String,
    },
    #[error("trajectory has {found} latents, expected {expected}")]
    TrajectoryLength { expected: usize, found: usize },
    #[error("unknown variation {0}")]
    UnknownVariation(String),
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("at least two masks are required, got {0}")]
    TooFewMasks(usize),
    #[error("malformed data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Short machine-readable identifier, used in error payloads by the CLI and service.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptySchedule => "empty_schedule",
            Error::Overlap { .. } => "overlap",
            Error::Gap { .. } => "gap",
            Error::BadInterval(_) => "bad_interval",
            Error::StepOutOfRange { .. } => "step_out_of_range",
            Error::InvalidPrompt(_) => "invalid_prompt",
            Error::DegenerateMap { .. } => "degenerate_map",
            Error::ResolutionMismatch { .. } => "resolution_mismatch",
            Error::NoLayerAtResolution(_) => "no_layer_at_resolution",
            Error::EmptySegment => "empty_segment",
            Error::UnknownNoun(_) => "unknown_noun",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::InvalidValue(_) => "invalid_value",
            Error::Provider(_) => "provider",
            Error::UnknownWord(_) => "unknown_word",
            Error::Backend(_) => "backend",
            Error::Hook { .. } => "hook",
            Error::TrajectoryLength { .. } => "trajectory_length",
            Error::UnknownVariation(_) => "unknown_variation",
            Error::UnknownNode(_) => "unknown_node",
            Error::TooFewMasks(_) => "too_few_masks",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }
}
