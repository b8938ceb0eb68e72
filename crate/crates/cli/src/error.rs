use thiserror::Error;

/// Failure of a CLI run, grouped by exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Solver(#[source] mfbdsde_core::Error),

    #[error("{0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Output(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    /// 2 configuration, 3 divergence, 4 iteration limit, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use mfbdsde_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Solver(e) => match e {
                E::InvalidArgument(_) | E::Parse { .. } | E::UnboundVariable(_) => 2,
                E::Divergence { .. } => 3,
                E::IterationLimit { .. } => 4,
                _ => 1,
            },
            CliError::Io(_) | CliError::Output(_) => 1,
        }
    }

    /// Machine-readable category.
    pub fn category(&self) -> &'static str {
        match self.exit_code() {
            2 => "config",
            3 => "divergence",
            4 => "iteration-limit",
            _ => "error",
        }
    }

    /// One JSON line for stderr.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self.category(), "exit_code": self.exit_code(), "message": self.to_string() })
            .to_string()
    }
}

impl From<mfbdsde_core::Error> for CliError {
    fn from(e: mfbdsde_core::Error) -> Self {
        CliError::Solver(e)
    }
}

impl From<toml::de::Error> for CliError {
    fn from(e: toml::de::Error) -> Self {
        CliError::Config(format!("config file: {e}"))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
