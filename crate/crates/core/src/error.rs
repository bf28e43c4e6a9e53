use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("infeasible scene: {0}")]
    InfeasibleScene(String),
    #[error("invalid step count T={0}; need T >= 1")]
    InvalidT(usize),
    #[error("degenerate batch: decorrelation needs at least 2 rows, got {0}")]
    DegenerateBatch(usize),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Grad(#[from] gradcore::GradError),
}

impl PlanError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit code for the command-line front end, one per error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::InvalidT(_) => 2,
            Self::Io { .. } => 3,
            Self::Format(_) => 4,
            Self::InvalidTrajectory(_) | Self::InfeasibleScene(_) => 5,
            Self::DegenerateBatch(_) | Self::Grad(_) => 6,
        }
    }
}
