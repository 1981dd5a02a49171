use std::fmt;

/// Error type shared by every module in the crate.
#[derive(Debug, thiserror::Error)]
pub enum PalError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("infeasible target: {frames} frames cannot align {required} required positions")]
    Infeasible { frames: usize, required: usize },

    #[error("oracle scope error: {0}")]
    OracleScope(String),

    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("assembly error: {0}")]
    Assembly(String),

    #[error("policy error: {0}")]
    Policy(String),

    #[error("study error: {0}")]
    Study(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl PalError {
    /// Short stable identifier, used in machine-parsable CLI error lines.
    pub fn kind(&self) -> ErrorKind {
        match self {
            PalError::Dimension(_) => ErrorKind::Dimension,
            PalError::Numeric(_) => ErrorKind::Numeric,
            PalError::Config(_) => ErrorKind::Config,
            PalError::Input(_) => ErrorKind::Input,
            PalError::Contract(_) => ErrorKind::Contract,
            PalError::Checkpoint(_) => ErrorKind::Checkpoint,
            PalError::Infeasible { .. } => ErrorKind::Infeasible,
            PalError::OracleScope(_) => ErrorKind::OracleScope,
            PalError::Training { .. } => ErrorKind::Training,
            PalError::Assembly(_) => ErrorKind::Assembly,
            PalError::Policy(_) => ErrorKind::Policy,
            PalError::Study(_) => ErrorKind::Study,
            PalError::Io(_) => ErrorKind::Io,
            PalError::Json(_) => ErrorKind::Json,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Dimension,
    Numeric,
    Config,
    Input,
    Contract,
    Checkpoint,
    Infeasible,
    OracleScope,
    Training,
    Assembly,
    Policy,
    Study,
    Io,
    Json,
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ErrorKind::Dimension => "dimension",
            ErrorKind::Numeric => "numeric",
            ErrorKind::Config => "config",
            ErrorKind::Input => "input",
            ErrorKind::Contract => "contract",
            ErrorKind::Checkpoint => "checkpoint",
            ErrorKind::Infeasible => "infeasible",
            ErrorKind::OracleScope => "oracle_scope",
            ErrorKind::Training => "training",
            ErrorKind::Assembly => "assembly",
            ErrorKind::Policy => "policy",
            ErrorKind::Study => "study",
            ErrorKind::Io => "io",
            ErrorKind::Json => "json",
        };
        f.write_str(s)
    }
}

pub type Result<T, E = PalError> = std::result::Result<T, E>;
