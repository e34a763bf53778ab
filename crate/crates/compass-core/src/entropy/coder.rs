//! Carry-less 32-bit range coder.
//!
//! Classic byte-oriented range coder with 16-bit frequency precision. Carries
//! are avoided by truncating the coding interval whenever it straddles a
//! 2^16 boundary while too small to emit a byte, so emitted bytes are final
//! the moment they leave the encoder. Encoder and decoder renormalize under
//! identical conditions, which makes the pair bit-exact.
//!
//! Instances are single-use: encode a sequence, call [`RangeEncoder::finish`],
//! and feed the bytes to a fresh [`RangeDecoder`].

use super::TOTAL_FREQ;

const TOP: u32 = 1 << 24;
const BOT: u32 = 1 << 16;

/// Streaming range encoder producing a byte vector.
pub struct RangeEncoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            out: Vec::new(),
        }
    }

    /// Encodes one symbol occupying `[cum, cum + freq)` out of `total`.
    ///
    /// Requires `freq >= 1`, `cum + freq <= total`, and `total <= 1 << 16`.
    pub fn encode(&mut self, cum: u32, freq: u32, total: u32) {
        debug_assert!(freq >= 1 && cum + freq <= total && total <= TOTAL_FREQ);
        self.range /= total;
        self.low = self.low.wrapping_add(cum * self.range);
        self.range *= freq;
        self.renormalize();
    }

    fn renormalize(&mut self) {
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                // Interval straddles a 2^16 boundary while too small to emit:
                // truncate it at the boundary so the pending byte is final.
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    /// Flushes the final state (4 bytes) and returns the stream.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..4 {
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
        }
        self.out
    }
}

/// Streaming range decoder over a byte slice.
///
/// Reads past the end of the input are treated as zero bytes; corrupted
/// streams therefore decode to arbitrary symbols rather than panicking, and
/// corruption is detected by the container checksum instead.
pub struct RangeDecoder<'a> {
    low: u32,
    range: u32,
    code: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        let mut dec = RangeDecoder {
            low: 0,
            range: u32::MAX,
            code: 0,
            input,
            pos: 0,
        };
        for _ in 0..4 {
            dec.code = (dec.code << 8) | u32::from(dec.next_byte());
        }
        dec
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.input.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Returns the frequency offset of the next symbol, in `[0, total)`.
    ///
    /// The caller locates the symbol whose span contains the offset and then
    /// commits it with [`RangeDecoder::decode`] using that span.
    pub fn decode_freq(&mut self, total: u32) -> u32 {
        debug_assert!(total >= 1 && total <= TOTAL_FREQ);
        self.range /= total;
        let f = self.code.wrapping_sub(self.low) / self.range;
        f.min(total - 1)
    }

    /// Commits the symbol spanning `[cum, cum + freq)`; mirrors the encoder.
    pub fn decode(&mut self, cum: u32, freq: u32) {
        self.low = self.low.wrapping_add(cum * self.range);
        self.range *= freq;
        self.renormalize();
    }

    fn renormalize(&mut self) {
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.code = (self.code << 8) | u32::from(self.next_byte());
            self.low <<= 8;
            self.range <<= 8;
        }
    }
}
