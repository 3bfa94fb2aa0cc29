use thiserror::Error;

use crate::transport::TransportError;

#[derive(Debug, Error)]
pub enum PkdError {
    #[error("length mismatch: expected {expected} bits, got {actual}")]
    Length { expected: usize, actual: usize },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("mapping rule is not a bijection: value {value} appears more than once")]
    NotBijective { value: u64 },

    #[error("reconciliation desynchronized: {0}")]
    Desync(String),

    #[error("peer aborted the session (reason code 0x{0:02x})")]
    PeerAbort(u8),

    #[error("key material: {0}")]
    KeyMaterial(String),

    #[error(transparent)]
    Transport(#[from] TransportError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = PkdError> = std::result::Result<T, E>;
