//! Reference range coder with 32-bit range, carry propagation, and byte-wise
//! renormalization.
//!
//! A symbol with cumulative frequency `cum` and frequency `freq` (out of
//! 2^16) narrows the interval to
//! `[low + (range*cum) >> 16, low + (range*(cum+freq)) >> 16)`, both products
//! taken exactly in 64 bits. Whenever `range < 2^24` a byte is shifted out.
//! The first byte the carry machinery produces is always zero and is not
//! written. Flushing shifts out five more bytes, so an empty stream is four
//! bytes long.
//!
//! Escaped symbols are followed by their two's-complement 16-bit pattern as
//! two uniform 8-bit symbols, high byte first.

use super::cdf::{CdfTable, PRECISION_BITS};
use super::CoderError;

const TOP: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    skip_first: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 1,
            skip_first: true,
            out: Vec::new(),
        }
    }

    fn emit(&mut self, byte: u8) {
        if self.skip_first {
            debug_assert_eq!(byte, 0);
            self.skip_first = false;
        } else {
            self.out.push(byte);
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.emit(byte.wrapping_add(carry));
                byte = 0xFF;
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

    /// Codes the sub-interval `[cum, cum + freq)` of a 2^16 total.
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= 1 << PRECISION_BITS);
        let r = self.range as u64;
        let lo = (r * cum as u64) >> PRECISION_BITS;
        let hi = (r * (cum + freq) as u64) >> PRECISION_BITS;
        self.low += lo;
        self.range = (hi - lo) as u32;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn encode_byte(&mut self, byte: u8) {
        self.encode((byte as u32) << 8, 1 << 8);
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    range: u32,
    code: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self, CoderError> {
        let mut d = Self {
            data,
            pos: 0,
            range: u32::MAX,
            code: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8, CoderError> {
        let b = *self
            .data
            .get(self.pos)
            .ok_or(CoderError::Truncated { position: self.pos })?;
        self.pos += 1;
        Ok(b)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Finds the entry whose interval contains the current code, given the
    /// cumulative table `cdf` (length entries + 1, last = 2^16).
    pub fn decode(&mut self, cdf: &[u32]) -> Result<usize, CoderError> {
        self.decode_with(cdf.len() - 1, |i| cdf[i])
    }

    pub fn decode_byte(&mut self) -> Result<u8, CoderError> {
        Ok(self.decode_with(256, |i| (i as u32) << 8)? as u8)
    }

    fn decode_with(
        &mut self,
        entries: usize,
        cum: impl Fn(usize) -> u32,
    ) -> Result<usize, CoderError> {
        let r = self.range as u64;
        let bound = |i: usize| ((r * cum(i) as u64) >> PRECISION_BITS) as u32;
        // largest i with bound(i) <= code
        let (mut lo, mut hi) = (0usize, entries);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if bound(mid) <= self.code {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let start = bound(lo);
        self.code = self.code.wrapping_sub(start);
        self.range = bound(lo + 1) - start;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.range <<= 8;
        }
        Ok(lo)
    }
}

fn check_counts(symbols: usize, contexts: usize) -> Result<(), CoderError> {
    if symbols != contexts {
        return Err(CoderError::CountMismatch { symbols, contexts });
    }
    Ok(())
}

fn table_for(tables: &[CdfTable], index: usize, context: usize) -> Result<&CdfTable, CoderError> {
    tables
        .get(context)
        .ok_or(CoderError::MissingTable { index, context })
}

/// Encodes `symbols[i]` with `tables[contexts[i]]`.
pub fn encode_symbols(
    symbols: &[i32],
    tables: &[CdfTable],
    contexts: &[usize],
) -> Result<Vec<u8>, CoderError> {
    check_counts(symbols.len(), contexts.len())?;
    let mut enc = RangeEncoder::new();
    for (index, (&symbol, &context)) in symbols.iter().zip(contexts).enumerate() {
        let table = table_for(tables, index, context)?;
        let cdf = table.cdf();
        if let Some(i) = table.index_of(symbol) {
            enc.encode(cdf[i], cdf[i + 1] - cdf[i]);
            continue;
        }
        let e = table
            .escape_index()
            .ok_or(CoderError::OutOfRange { index, symbol })?;
        let raw =
            i16::try_from(symbol).map_err(|_| CoderError::EscapeOverflow { index, symbol })? as u16;
        enc.encode(cdf[e], cdf[e + 1] - cdf[e]);
        enc.encode_byte((raw >> 8) as u8);
        enc.encode_byte(raw as u8);
    }
    Ok(enc.finish())
}

/// Inverse of [`encode_symbols`]; `contexts.len()` symbols are decoded.
pub fn decode_symbols(
    bytes: &[u8],
    tables: &[CdfTable],
    contexts: &[usize],
) -> Result<Vec<i32>, CoderError> {
    for (index, &context) in contexts.iter().enumerate() {
        table_for(tables, index, context)?;
    }
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(contexts.len());
    for &context in contexts {
        let table = &tables[context];
        let i = dec.decode(table.cdf())?;
        if Some(i) == table.escape_index() {
            let hi = dec.decode_byte()? as u16;
            let lo = dec.decode_byte()? as u16;
            out.push(((hi << 8) | lo) as i16 as i32);
        } else {
            out.push(table.offset() + i as i32);
        }
    }
    Ok(out)
}

/// Ideal code length `sum -log2 P_table(s)` in bits, counting 16 raw bits
/// per escape.
pub fn table_cost_bits(symbols: &[i32], tables: &[CdfTable], contexts: &[usize]) -> f64 {
    symbols
        .iter()
        .zip(contexts)
        .map(|(&s, &c)| {
            let t = &tables[c];
            let escaped = t.index_of(s).is_none();
            -t.probability(s).log2() + if escaped { 16.0 } else { 0.0 }
        })
        .sum()
}
