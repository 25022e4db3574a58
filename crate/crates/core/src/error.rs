use thiserror::Error;

/// Errors reported by the receiver library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("spreading factor {0} is outside the supported range")]
    InvalidSpreadingFactor(u8),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("symbol {value} out of range for N = {n_chips}")]
    SymbolOutOfRange { value: usize, n_chips: usize },

    #[error("expected {expected} samples, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("exhaustive search limited to N <= {max}, got N = {n_chips}")]
    OracleTooLarge { n_chips: usize, max: usize },

    #[error("event {event} is not valid in state {state}")]
    InvalidTransition {
        state: &'static str,
        event: &'static str,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
