//! Adler-32 payload checksum.
//!
//! Standard Adler-32: two running sums modulo 65521 (the largest prime below
//! 2^16), initialized to `a = 1`, `b = 0`, combined as `(b << 16) | a`.
//! The modulo is deferred across blocks of input for speed; the result is
//! identical to the per-byte definition.

const MOD: u32 = 65521;

/// Longest run of bytes that cannot overflow the deferred 32-bit sums.
const NMAX: usize = 5552;

/// Computes the Adler-32 checksum of `data`.
pub fn adler32(data: &[u8]) -> u32 {
    let mut a: u32 = 1;
    let mut b: u32 = 0;
    for chunk in data.chunks(NMAX) {
        for &byte in chunk {
            a += u32::from(byte);
            b += a;
        }
        a %= MOD;
        b %= MOD;
    }
    (b << 16) | a
}
