use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invalid protocol:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
    #[error("oracle mismatch: {0}")]
    OracleMismatch(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Engine(#[from] pathwig::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Syntax(_) => 2,
            CliError::Schema(_) => 3,
            CliError::Validation(_) => 4,
            CliError::OracleMismatch(_) => 5,
            CliError::Io(_) | CliError::Engine(_) => 1,
        }
    }
}
