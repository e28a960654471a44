use std::fmt;

/// A failure reported as `error: <kind>: <message>` on one line.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Io(String),
    Input(String),
    Core(mmctp_core::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        use mmctp_core::Error as E;
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Input(_) => "input",
            CliError::Core(e) => match e {
                E::Config(_) | E::UnknownVariant(_) => "config",
                E::Io { .. } => "io",
                E::NoData(_) | E::EmptySplit(_) => "no-data",
                E::Mismatch(_) => "mismatch",
                E::Format { .. } | E::Json(_) => "format",
                E::Divergence { .. } | E::NonFinite { .. } => "divergence",
                _ => "internal",
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = match self {
            CliError::Usage(m) | CliError::Config(m) | CliError::Io(m) | CliError::Input(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
        };
        // Keep it on one line whatever the source message looks like.
        let flat: Vec<&str> = msg.split_whitespace().collect();
        write!(f, "error: {}: {}", self.kind(), flat.join(" "))
    }
}

impl From<mmctp_core::Error> for CliError {
    fn from(e: mmctp_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}
