use bevr_tensor::TensorError;
use thiserror::Error;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid camera: {0}")]
    Camera(String),
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("cell ({row}, {col}) outside level {level} extents {rows}×{cols}")]
    CellOutOfRange {
        level: usize,
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
    #[error("rig file line {line}: {reason}")]
    RigParse { line: usize, reason: String },
    #[error("invalid model input: {0}")]
    Input(String),
    #[error("placement failed: {0}")]
    Placement(String),
    #[error("unknown class {0:?} (expected vehicle, pedestrian, drivable or lane)")]
    UnknownClass(String),
    #[error("class {0} is not in the scene's class set")]
    ClassNotInScene(&'static str),
    #[error("target value {value} at cell {index} is not 0 or 1")]
    NonBinaryTarget { index: usize, value: f64 },
    #[error("class sets differ: {0}")]
    ClassMismatch(String),
    #[error("corrupt dataset at byte {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
