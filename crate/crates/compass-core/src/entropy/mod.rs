//! Lossless entropy coding for quantized latents.
//!
//! This module turns integer-valued latent tensors into compact byte streams
//! and back, using a 32-bit carry-less range coder driven by integer CDF
//! tables with 16-bit probability precision. Symbols within a configurable
//! central range are coded directly from the table; outliers are coded as an
//! escape symbol followed by the raw value in four uniform bytes.
//!
//! Submodules:
//! - [`coder`]: the range encoder/decoder state machines.
//! - [`tables`]: integer CDF construction from floating-point bin
//!   probabilities (shared verbatim by encoder and decoder, so streams are
//!   bit-exact in-process).
//! - [`latent`]: whole-tensor symbol coding for the Gaussian-conditioned main
//!   latents and the channelwise-prior hyper latents.
//! - [`checksum`]: Adler-32 over layer payloads for corruption detection.
//! - [`container`]: the `.cmps` multi-layer byte format with prefix
//!   extraction.

pub mod checksum;
pub mod coder;
pub mod container;
pub mod latent;
pub mod tables;

pub use checksum::adler32;
pub use coder::{RangeDecoder, RangeEncoder};
pub use container::{extract_prefix, pack, peek_header, unpack, LayerSubstream, StreamHeader};
pub use tables::CdfTable;

/// Probability precision in bits: every CDF table totals `1 << PRECISION_BITS`.
pub const PRECISION_BITS: u32 = 16;

/// Total frequency count shared by all CDF tables.
pub const TOTAL_FREQ: u32 = 1 << PRECISION_BITS;
