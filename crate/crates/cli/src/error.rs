use thiserror::Error;

/// Errors surfaced by the command runners, grouped by exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] affinitynet::Error),
}

impl CliError {
    /// 1 for bad input, 2 for failures during computation.
    pub fn exit_code(&self) -> i32 {
        use affinitynet::Error as E;
        match self {
            CliError::Config(_) => 1,
            CliError::Io(_) => 2,
            CliError::Core(e) => match e {
                E::Diverged { .. }
                | E::NonFinite(_)
                | E::Io(_)
                | E::NotSymmetric(_)
                | E::DegenerateDegree(_)
                | E::Json(_) => 2,
                _ => 1,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
