use frostmil_core::Error;
use serde_json::{json, Value};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),

    #[error("{0}")]
    Usage(String),
}

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_MISSING_INPUT: i32 = 2;
pub const EXIT_INVALID: i32 = 3;
pub const EXIT_NON_FINITE: i32 = 4;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_INVALID,
            CliError::Core(e) => match e {
                Error::NotFound(_) => EXIT_MISSING_INPUT,
                Error::NonFinite { .. } => EXIT_NON_FINITE,
                Error::Validation { .. }
                | Error::Undefined { .. }
                | Error::InvalidArgument(_)
                | Error::Shape { .. }
                | Error::Format { .. }
                | Error::Json { .. } => EXIT_INVALID,
                Error::Io { .. } | Error::Image(_) => EXIT_FAILURE,
            },
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => match e {
                Error::NotFound(_) => "missing_input",
                Error::NonFinite { .. } => "non_finite",
                Error::Undefined { .. } => "metric_undefined",
                Error::Validation { .. } | Error::InvalidArgument(_) | Error::Shape { .. } => "validation",
                Error::Format { .. } | Error::Json { .. } => "malformed_input",
                Error::Io { .. } | Error::Image(_) => "io",
            },
        }
    }

    /// One-line machine-readable description.
    pub fn to_json(&self, command: &str) -> Value {
        let mut v = json!({
            "command": command,
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        match self {
            CliError::Core(Error::Undefined { metric, .. }) => v["metric"] = json!(metric),
            CliError::Core(Error::NotFound(path)) => v["path"] = json!(path),
            CliError::Core(Error::Validation { field, .. }) => v["field"] = json!(field),
            _ => {}
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::from(Error::NotFound("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(Error::undefined("AUROC", "one class")).exit_code(), 3);
        let nan = Error::NonFinite {
            what: "loss".into(),
            location: "step 3".into(),
        };
        assert_eq!(CliError::from(nan).exit_code(), 4);
        let j = CliError::from(Error::undefined("AUROC", "one class")).to_json("eval");
        assert_eq!(j["metric"], "AUROC");
    }
}
