use thiserror::Error;
use usst_numcore::NumError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),

    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),

    #[error("pose step {step} out of range 1..={len}")]
    PoseIndex { step: usize, len: usize },

    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("empty clip: start {start} > end {end}")]
    EmptyClip { start: usize, end: usize },

    #[error("insufficient valid depth points: {found} < {required}")]
    InsufficientData { found: usize, required: usize },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
