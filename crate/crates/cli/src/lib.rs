//! Command implementations behind the `zsl` binary.

pub mod commands;
pub mod config;
pub mod tune;

use zsl_core::ZslError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// A failure with the process exit code it maps to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError { code: EXIT_CONFIG, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        CliError { code: EXIT_IO, message: message.into() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<ZslError> for CliError {
    fn from(e: ZslError) -> Self {
        let code = match &e {
            ZslError::Io { .. }
            | ZslError::Parse { .. }
            | ZslError::BadMagic { .. }
            | ZslError::UnsupportedVersion(_)
            | ZslError::TruncatedPayload { .. }
            | ZslError::DimensionOverflow { .. } => EXIT_IO,
            ZslError::SingularSylvester { .. }
            | ZslError::Numerical(_)
            | ZslError::ZeroNorm(_)
            | ZslError::DegenerateNeighborhood(_) => EXIT_NUMERICAL,
            _ => EXIT_CONFIG,
        };
        CliError { code, message: e.to_string() }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Rectify,
    Amssfe,
    Graphzsl,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Rectify => "rectify",
            Method::Amssfe => "amssfe",
            Method::Graphzsl => "graphzsl",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = CliError;
    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "rectify" => Ok(Method::Rectify),
            "amssfe" => Ok(Method::Amssfe),
            "graphzsl" => Ok(Method::Graphzsl),
            other => Err(CliError::config(format!(
                "unknown method {other:?} (expected rectify, amssfe or graphzsl)"
            ))),
        }
    }
}

/// Worker cap from `ZSL_THREADS`, else the machine's parallelism.
pub fn thread_budget() -> CliResult<usize> {
    match std::env::var("ZSL_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::config(format!("ZSL_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}
