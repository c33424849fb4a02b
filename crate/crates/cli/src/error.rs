use moe_core::MoeError;
use thiserror::Error;

/// Failure of a command, carrying its exit code class.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, unreadable files or incompatible inputs (exit 2).
    #[error("{0}")]
    Usage(String),
    /// Estimation or inference broke down (exit 3).
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }
}

impl From<MoeError> for CliError {
    fn from(e: MoeError) -> Self {
        let msg = e.to_string();
        match e {
            MoeError::DimensionMismatch { .. }
            | MoeError::KindMismatch { .. }
            | MoeError::InvalidVariance(_)
            | MoeError::InvalidResponse(_)
            | MoeError::InvalidConfig(_)
            | MoeError::EmptyDataset
            | MoeError::InfeasibleInit { .. }
            | MoeError::Unsupported(_) => CliError::Usage(msg),
            MoeError::NonFinite(_)
            | MoeError::RankDeficient { .. }
            | MoeError::EmptyComponent { .. }
            | MoeError::BlockFailed { .. }
            | MoeError::AllStartsFailed(_)
            | MoeError::SelectionFailed(_)
            | MoeError::SingularInformation { .. } => CliError::Numerical(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
