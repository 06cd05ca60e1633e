use std::path::{Path, PathBuf};

pub type Result<T, E = AppError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("{0}")]
    Validation(String),

    #[error("{path}:{line}: {msg}")]
    Format { path: PathBuf, line: usize, msg: String },

    #[error("missing prerequisite {what} at {path}; run `{hint}` first")]
    Missing { what: String, path: PathBuf, hint: &'static str },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Model(#[from] gpdssm_core::Error),
}

impl AppError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        AppError::Io { path: path.as_ref().to_path_buf(), source }
    }

    pub fn format(path: impl AsRef<Path>, line: usize, msg: impl Into<String>) -> Self {
        AppError::Format { path: path.as_ref().to_path_buf(), line, msg: msg.into() }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        AppError::Validation(msg.into())
    }

    /// Process exit status: 2 validation, 3 numerical failure, 4 I/O.
    pub fn exit_code(&self) -> u8 {
        match self {
            AppError::Validation(_) | AppError::Format { .. } | AppError::Missing { .. } => 2,
            AppError::Io { .. } => 4,
            AppError::Model(e) => model_exit_code(e),
        }
    }
}

fn model_exit_code(e: &gpdssm_core::Error) -> u8 {
    use gpdssm_core::Error as E;
    match e {
        E::Shape { source, .. } => model_exit_code(source),
        E::AlignmentDiverged { .. }
        | E::FlowBlowUp { .. }
        | E::Conditioning { .. }
        | E::TrainingDiverged { .. }
        | E::NewtonNonConvergence { .. }
        | E::RankDeficient(_) => 3,
        _ => 2,
    }
}
