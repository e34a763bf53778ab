//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the codec, trainer, and evaluation tools.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed something structurally invalid (bad dims, empty layer list,
    /// non-increasing scales, out-of-range indices, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A bitstream could not be parsed: bad magic, unsupported version,
    /// truncated payload, or inconsistent header fields.
    #[error("bitstream decode error: {0}")]
    Decode(String),

    /// Per-layer integrity checksum did not match the payload.
    #[error("checksum mismatch in layer {layer}")]
    ChecksumMismatch { layer: usize },

    /// Requested layer index is not present in the stream.
    #[error("layer {requested} out of range: stream has layers 0..={max}")]
    LayerOutOfRange { requested: usize, max: usize },

    /// A checkpoint file is malformed or missing required entries.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training was asked to run an enhancement-layer stage without a base-layer
    /// checkpoint to freeze.
    #[error("missing base-layer checkpoint: {0}")]
    MissingBaseCheckpoint(String),

    /// Dataset problems: empty directory, no readable images.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Image file could not be decoded or encoded.
    #[error("image error: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
