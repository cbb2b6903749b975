use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} is outside the control domain [{lo}, 0]")]
    Domain { t: f64, lo: f64 },

    #[error("invalid control sequence: {0}")]
    InvalidSequence(String),

    #[error("integration produced a non-finite state at t = {t}")]
    Integration { t: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("sample generation stalled after {rejections} consecutive rejections; enlarge the accept region or lower lambda")]
    GenerationStall { rejections: u64 },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("training diverged: the loss became {0}")]
    Diverged(f64),

    #[error("training loop failed at iteration {iteration}: {reason}")]
    Loop { iteration: usize, reason: String },

    #[error("value gradient unavailable in dimension {dim} at state {state:?}")]
    GradientUnavailable { dim: usize, state: Vec<f64> },

    #[error("corridor is empty")]
    EmptyCorridor,

    #[error("no control sequence reaches the goal within tolerance over the search horizon")]
    NotFound,

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
