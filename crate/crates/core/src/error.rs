use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Errors raised by the measurement, statistics and trial kernels.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("data length {actual} does not match grid size {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("inputs do not share a grid")]
    GridMismatch,
    #[error("label id {0} is not in the class table")]
    UnknownLabel(u16),
    #[error("class {0} has no voxels")]
    EmptyClass(u16),
    #[error("missing required landmark {id} ({name})")]
    MissingLandmark { id: u16, name: &'static str },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("infeasible phantom: {0}")]
    Infeasible(String),
    #[error("z-score is infinite: zero variance with differing means ({sign}inf)")]
    InfiniteZ { sign: char },
    #[error("insufficient subjects: {0}")]
    Insufficient(String),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }
}
