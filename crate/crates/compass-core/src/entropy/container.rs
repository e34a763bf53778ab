//! Multi-layer bitstream container (`.cmps`).
//!
//! Byte layout (all multi-byte integers big-endian):
//!
//! ```text
//! magic            4 bytes  "CMPS"
//! version          u8       currently 1
//! layer_count      u8       number of layers (base layer + enhancement layers)
//! quality_index    u8       operating-point id used to look up model weights
//! dims             layer_count x (height u16, width u16)
//! lengths          layer_count x u32    byte length of each substream
//! substreams       concatenated payloads in layer order
//! ```
//!
//! Each substream is self-delimiting given its length:
//!
//! ```text
//! z_length         u32      byte length of the hyper-latent stream
//! z bytes          z_length
//! y bytes          length - z_length - 8
//! checksum         u32      Adler-32 over everything above (z_length field,
//!                           z bytes, y bytes)
//! ```
//!
//! Truncating the stream after any layer boundary and rewriting the header
//! for the kept layers yields a valid stream whose layers decode
//! byte-identically; [`extract_prefix`] does exactly that without touching
//! payload bytes.

use crate::error::{Error, Result};

use super::checksum::adler32;

pub const MAGIC: [u8; 4] = *b"CMPS";
pub const FORMAT_VERSION: u8 = 1;

/// Per-layer payload: the two entropy-coded latent streams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSubstream {
    pub z: Vec<u8>,
    pub y: Vec<u8>,
}

impl LayerSubstream {
    /// Serialized byte length including framing and checksum.
    pub fn byte_len(&self) -> usize {
        4 + self.z.len() + self.y.len() + 4
    }
}

/// Parsed header of a container stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamHeader {
    pub version: u8,
    pub quality_index: u8,
    /// Per-layer output dimensions `(height, width)`, base layer first.
    pub dims: Vec<(u16, u16)>,
}

impl StreamHeader {
    pub fn layer_count(&self) -> usize {
        self.dims.len()
    }
}

/// Serializes layers into a container stream.
pub fn pack(quality_index: u8, dims: &[(u16, u16)], substreams: &[LayerSubstream]) -> Result<Vec<u8>> {
    if dims.is_empty() || dims.len() != substreams.len() {
        return Err(Error::invalid(format!(
            "layer dim count {} does not match substream count {} (both must be >= 1)",
            dims.len(),
            substreams.len()
        )));
    }
    if dims.len() > usize::from(u8::MAX) {
        return Err(Error::invalid(format!("too many layers: {}", dims.len())));
    }
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(FORMAT_VERSION);
    out.push(dims.len() as u8);
    out.push(quality_index);
    for &(h, w) in dims {
        out.extend_from_slice(&h.to_be_bytes());
        out.extend_from_slice(&w.to_be_bytes());
    }
    for sub in substreams {
        let len = u32::try_from(sub.byte_len())
            .map_err(|_| Error::invalid("substream exceeds 4 GiB"))?;
        out.extend_from_slice(&len.to_be_bytes());
    }
    for sub in substreams {
        let start = out.len();
        let z_len = u32::try_from(sub.z.len())
            .map_err(|_| Error::invalid("hyper-latent stream exceeds 4 GiB"))?;
        out.extend_from_slice(&z_len.to_be_bytes());
        out.extend_from_slice(&sub.z);
        out.extend_from_slice(&sub.y);
        let sum = adler32(&out[start..]);
        out.extend_from_slice(&sum.to_be_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Decode("truncated stream".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn parse_header<'a>(cur: &mut Cursor<'a>) -> Result<(StreamHeader, Vec<u32>)> {
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::Decode("bad magic".into()));
    }
    let version = cur.u8()?;
    if version != FORMAT_VERSION {
        return Err(Error::Decode(format!("unsupported version {version}")));
    }
    let count = cur.u8()?;
    if count == 0 {
        return Err(Error::Decode("zero layers".into()));
    }
    let quality_index = cur.u8()?;
    let mut dims = Vec::with_capacity(usize::from(count));
    for _ in 0..count {
        let h = cur.u16()?;
        let w = cur.u16()?;
        if h == 0 || w == 0 {
            return Err(Error::Decode("zero-sized layer dims".into()));
        }
        dims.push((h, w));
    }
    let mut lengths = Vec::with_capacity(usize::from(count));
    for _ in 0..count {
        lengths.push(cur.u32()?);
    }
    Ok((
        StreamHeader {
            version,
            quality_index,
            dims,
        },
        lengths,
    ))
}

/// Parses and validates only the header — cheap way to learn layer count,
/// dimensions, and quality index without touching substream checksums.
pub fn peek_header(bytes: &[u8]) -> Result<StreamHeader> {
    let mut cur = Cursor { bytes, pos: 0 };
    Ok(parse_header(&mut cur)?.0)
}

/// Parses a container stream and verifies every layer checksum.
pub fn unpack(bytes: &[u8]) -> Result<(StreamHeader, Vec<LayerSubstream>)> {
    let mut cur = Cursor { bytes, pos: 0 };
    let (header, lengths) = parse_header(&mut cur)?;
    let mut subs = Vec::with_capacity(lengths.len());
    for (layer, &len) in lengths.iter().enumerate() {
        let len = len as usize;
        if len < 8 {
            return Err(Error::Decode(format!("layer {layer} substream too short")));
        }
        let body = cur.take(len)?;
        let stored = u32::from_be_bytes([body[len - 4], body[len - 3], body[len - 2], body[len - 1]]);
        if adler32(&body[..len - 4]) != stored {
            return Err(Error::ChecksumMismatch { layer });
        }
        let z_len = u32::from_be_bytes([body[0], body[1], body[2], body[3]]) as usize;
        if z_len > len - 8 {
            return Err(Error::Decode(format!(
                "layer {layer} hyper-latent length {z_len} exceeds substream"
            )));
        }
        subs.push(LayerSubstream {
            z: body[4..4 + z_len].to_vec(),
            y: body[4 + z_len..len - 4].to_vec(),
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Decode("trailing bytes after last layer".into()));
    }
    Ok((header, subs))
}

/// Returns a new stream containing only layers `0..=k`, with payload bytes
/// copied verbatim.
pub fn extract_prefix(bytes: &[u8], k: usize) -> Result<Vec<u8>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let (header, lengths) = parse_header(&mut cur)?;
    let count = header.layer_count();
    if k >= count {
        return Err(Error::LayerOutOfRange {
            requested: k,
            max: count - 1,
        });
    }
    let keep = k + 1;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(FORMAT_VERSION);
    out.push(keep as u8);
    out.push(header.quality_index);
    for &(h, w) in &header.dims[..keep] {
        out.extend_from_slice(&h.to_be_bytes());
        out.extend_from_slice(&w.to_be_bytes());
    }
    for &len in &lengths[..keep] {
        out.extend_from_slice(&len.to_be_bytes());
    }
    for (layer, &len) in lengths.iter().enumerate() {
        let body = cur.take(len as usize).map_err(|_| {
            Error::Decode(format!("layer {layer} payload truncated"))
        })?;
        if layer < keep {
            out.extend_from_slice(body);
        }
    }
    Ok(out)
}
