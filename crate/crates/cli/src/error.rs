use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Runtime(_) => "runtime",
        }
    }

    pub fn message(&self) -> String {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m.clone(),
        }
    }
}

impl From<spincool::Error> for CliError {
    fn from(e: spincool::Error) -> Self {
        use spincool::Error as E;
        match e {
            E::InvalidParam { .. } | E::InvalidSchedule(_) | E::Config(_) | E::EmptyGrid => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
