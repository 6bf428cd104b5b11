use std::fmt;

/// A failure reported as one line, `error: <code>: <message>`.
#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(code: &'static str, message: String) -> Self {
        Self { code, message }
    }

    pub fn config(message: String) -> Self {
        Self::new("config", message)
    }

    pub fn usage(message: String) -> Self {
        Self::new("usage", message)
    }

    pub fn missing(path: &std::path::Path, producer: &str) -> Self {
        Self::new(
            "missing_artifact",
            format!(
                "{} not found; run `epcache {producer}` first",
                path.display()
            ),
        )
    }

    pub fn exit_code(&self) -> u8 {
        match self.code {
            "usage" => 2,
            "config" => 3,
            "missing_artifact" => 4,
            "io" => 5,
            _ => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let message = self
            .message
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ");
        write!(f, "error: {}: {message}", self.code)
    }
}

impl From<epcache::Error> for CliError {
    fn from(e: epcache::Error) -> Self {
        use epcache::Error as E;
        let code = match &e {
            E::Config(_) | E::Parameter(_) => "config",
            E::Io(_) => "io",
            E::BadMagic { .. }
            | E::UnsupportedVersion { .. }
            | E::Truncated { .. }
            | E::Malformed { .. } => "bad_artifact",
            _ => "runtime",
        };
        Self::new(code, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new("io", e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::new("bad_artifact", e.to_string())
    }
}
