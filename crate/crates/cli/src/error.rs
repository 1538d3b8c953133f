use serde::Serialize;

/// Error record printed as JSON on stderr.
#[derive(Debug, Clone, Serialize)]
pub struct CliError {
    pub code: String,
    pub message: String,
    #[serde(skip)]
    pub exit_code: i32,
}

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_IO: i32 = 5;

impl CliError {
    pub fn new(code: &str, message: impl Into<String>, exit_code: i32) -> Self {
        Self {
            code: code.into(),
            message: message.into(),
            exit_code,
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new("config", message, EXIT_USAGE)
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new("io", message, EXIT_IO)
    }
}

impl From<matchcal::Error> for CliError {
    fn from(e: matchcal::Error) -> Self {
        use matchcal::Error as E;
        let exit = match &e {
            E::Io { .. } => EXIT_IO,
            E::Csv(_)
            | E::MissingColumn(_)
            | E::NonNumeric { .. }
            | E::NonBinaryTreatment { .. }
            | E::EmptyDataset
            | E::InvalidDataset(_)
            | E::AlreadyExpanded(_) => EXIT_INPUT,
            E::InvalidArgument(_) | E::DimensionMismatch { .. } | E::InvalidReplicationMap(_) => EXIT_USAGE,
            _ => EXIT_NUMERIC,
        };
        Self::new(e.code(), e.to_string(), exit)
    }
}
