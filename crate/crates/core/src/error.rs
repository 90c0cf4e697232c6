use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid chain parameters: {0}")]
    InvalidParams(String),

    #[error("invalid chain state: {0}")]
    InvalidState(String),

    #[error("torque command invalid: {0}")]
    InvalidTorque(String),

    #[error("mass matrix is singular at joint configuration {theta:?}")]
    SingularMassMatrix { theta: Vec<f64> },

    #[error("integration produced a non-finite state (theta={theta:?}); reduce the step size or add substeps")]
    NonFiniteState { theta: Vec<f64> },

    #[error("unknown scenario `{0}` (expected rigid_pendulum, flexible_chain or chain_on_floor)")]
    UnknownScenario(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("layer {layer}: expected input shape {expected:?}, got {actual:?}")]
    ShapeMismatch {
        layer: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("layer {0}: backward called without a recorded forward pass")]
    NoForwardRecorded(String),

    #[error("weight file: {0}")]
    WeightFile(String),

    #[error("weight file version {found} is not supported (expected {expected})")]
    WeightVersion { found: u32, expected: u32 },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
