use std::path::{Path, PathBuf};

use thiserror::Error;

/// Errors surfaced by the command-line tool, each mapped to an exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error(transparent)]
    Core(#[from] fos_core::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("stage `{stage}` failed: {source}")]
    Stage { stage: &'static str, source: Box<CliError> },
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Self::Stage { .. } => e,
            e => Self::Stage { stage, source: Box::new(e) },
        }
    }

    /// 2 for bad input (arguments, files, parameters), 3 for numerical
    /// failures during a computation.
    pub fn exit_code(&self) -> i32 {
        use fos_core::Error as E;
        match self {
            Self::Stage { source, .. } => source.exit_code(),
            Self::Core(E::ShootingDiverged { .. } | E::FlowDiverged | E::SingularSystem(_) | E::RankDeficient { .. }) => 3,
            _ => 2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Validation("x".into()).exit_code(), 2);
        assert_eq!(CliError::Core(fos_core::Error::FlowDiverged).exit_code(), 3);
        let e = CliError::Core(fos_core::Error::SingularSystem("m".into())).in_stage("cca");
        assert_eq!(e.exit_code(), 3);
        assert!(e.to_string().starts_with("stage `cca` failed"));
        assert_eq!(CliError::Core(fos_core::Error::InvalidParameter("p".into())).exit_code(), 2);
    }
}
