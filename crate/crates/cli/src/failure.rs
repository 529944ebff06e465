//! Process exit codes.

use thiserror::Error;

pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_NUMERICAL: u8 = 2;
pub const EXIT_SHORTFALL: u8 = 3;

#[derive(Debug, Error)]
#[error("{message}")]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Failure { code: EXIT_CONFIG, message: message.into() }
    }
}

impl From<pppo::Error> for Failure {
    fn from(e: pppo::Error) -> Self {
        let code = match e {
            pppo::Error::Numerical(_) | pppo::Error::StepFailed { .. } => EXIT_NUMERICAL,
            pppo::Error::ProbeShortfall { .. } => EXIT_SHORTFALL,
            _ => EXIT_CONFIG,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<pppo_probe::Error> for Failure {
    fn from(e: pppo_probe::Error) -> Self {
        let code = match e {
            pppo_probe::Error::Shortfall { .. } => EXIT_SHORTFALL,
            _ => EXIT_CONFIG,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::config(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::config(e.to_string())
    }
}
