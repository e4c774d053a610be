//! Byte-oriented range coder with carry propagation (LZMA layout).
//!
//! The encoder keeps a 64-bit `low` so that a carry out of bit 32 can be
//! pushed back into already-buffered `0xFF` bytes. The always-zero first byte
//! of the classic construction is not emitted; the stream ends with four
//! flush bytes.

use super::cdf::PRECISION_BITS;
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    first: bool,
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
            cache: 0,
            pending: 1,
            first: true,
            out: Vec::new(),
        }
    }

    fn emit(&mut self, b: u8) {
        if self.first {
            // Leading byte of the cache chain is provably zero.
            debug_assert_eq!(b, 0);
            self.first = false;
        } else {
            self.out.push(b);
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.emit(temp.wrapping_add(carry));
                temp = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Narrows to `[start, start + size)` out of `2^16`.
    pub fn encode(&mut self, start: u32, size: u32) {
        debug_assert!(size > 0 && start + size <= 1 << PRECISION_BITS);
        let r = self.range >> PRECISION_BITS;
        self.low += r as u64 * start as u64;
        self.range = r * size;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self> {
        let mut d = RangeDecoder {
            code: 0,
            range: u32::MAX,
            bytes,
            pos: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next()? as u32;
        }
        Ok(d)
    }

    fn next(&mut self) -> Result<u8> {
        let b = *self
            .bytes
            .get(self.pos)
            .ok_or_else(|| Error::Corrupt(format!("range-coded stream truncated at byte {}", self.pos)))?;
        self.pos += 1;
        Ok(b)
    }

    /// Value in `[0, 2^16)` locating the next symbol; follow with [`Self::consume`].
    pub fn peek(&mut self) -> Result<u32> {
        let r = self.range >> PRECISION_BITS;
        let v = self.code / r;
        if v >= 1 << PRECISION_BITS {
            return Err(Error::Corrupt("range-coded stream is not consistent with its table".into()));
        }
        Ok(v)
    }

    pub fn consume(&mut self, start: u32, size: u32) -> Result<()> {
        let r = self.range >> PRECISION_BITS;
        self.code -= r * start;
        self.range = r * size;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next()? as u32;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn consumed(&self) -> usize {
        self.pos
    }
}
