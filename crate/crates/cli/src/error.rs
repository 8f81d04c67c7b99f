use std::fmt;
use std::path::Path;

use qpot::Error;

/// A failure with its process exit code.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> CliError {
        CliError { code: 1, kind: "io", message: format!("{}: {e}", path.display()) }
    }

    pub fn parse(message: String) -> CliError {
        CliError { code: 2, kind: "parse", message }
    }

    pub fn usage(message: String) -> CliError {
        CliError { code: 2, kind: "usage", message }
    }

    pub fn invalid_model(message: String) -> CliError {
        CliError { code: 3, kind: "invalid_model", message }
    }

    pub fn bad_ep(message: String) -> CliError {
        CliError { code: 4, kind: "equilibrium", message }
    }

    pub fn diverged(message: String) -> CliError {
        CliError { code: 5, kind: "diverged", message }
    }

    /// Single-line JSON for stderr.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self.kind, "exit_code": self.code, "message": self.message }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> CliError {
        match e {
            Error::Parse { .. } | Error::UnknownIdentifier { .. } => CliError::parse(e.to_string()),
            Error::InvalidConfig(_) => CliError::usage(e.to_string()),
            Error::Diverged { .. } => CliError::diverged(e.to_string()),
            Error::NotExitSaddle | Error::ComplexUnstableEigenvalue { .. } | Error::NotAttractor => {
                CliError::bad_ep(e.to_string())
            }
            _ => CliError::invalid_model(e.to_string()),
        }
    }
}
