//! Error types shared by every module in the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes disagree somewhere in the numeric pipeline; message names the tensors.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("unknown sample id {0}")]
    UnknownSampleId(u32),
    #[error("empty batch")]
    EmptyBatch,
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: u32, n_classes: usize },
    /// NaN or infinity produced where finite arithmetic was promised.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid config: {0}")]
    Config(String),
    /// Malformed dataset / model / trace file contents.
    #[error("data format: {0}")]
    Format(String),
    /// An operation was called outside its documented contract.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Wire-protocol state machine errors (handshake order, shape mismatch, timeout).
    #[error("protocol: {0}")]
    Protocol(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Frame-level decode failures. Each malformed-header case gets its own
/// variant so callers (and tests) can tell them apart.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    BadVersion(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("truncated frame: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("frame payload of {len} bytes exceeds cap of {cap}")]
    Oversize { len: usize, cap: usize },
    #[error("{0} trailing bytes after frame end")]
    TrailingBytes(usize),
    #[error("malformed tensor payload: {0}")]
    Payload(String),
}

impl Error {
    /// Stable process exit code for each error class; the CLI maps through this.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io(_) => 3,
            Error::Format(_) => 4,
            Error::Wire(_) | Error::Protocol(_) => 5,
            _ => 6,
        }
    }
}
