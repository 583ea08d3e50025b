use std::path::{Path, PathBuf};

pub type Result<T, E = VctError> = std::result::Result<T, E>;

/// Errors of the IO and pipeline layer. Each maps to a CLI exit code.
#[derive(Debug, thiserror::Error)]
pub enum VctError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed file: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] vct_core::Error),
    #[error("{failed} of {total} subjects failed")]
    Partial { failed: usize, total: usize },
}

impl VctError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        VctError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        VctError::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        VctError::Config(msg.into())
    }

    /// 1 partial data failure, 2 config or usage, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            VctError::Partial { .. } => 1,
            VctError::Config(_) => 2,
            VctError::Core(e) => match e {
                vct_core::Error::InvalidArgument(_) | vct_core::Error::Insufficient(_) => 2,
                _ => 1,
            },
            VctError::Io { .. } | VctError::Format { .. } => 3,
        }
    }
}

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| VctError::io(path, e))
}

pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| VctError::io(path, e))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| VctError::io(path, e))
}
