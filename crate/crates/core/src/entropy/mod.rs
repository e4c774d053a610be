//! Range coding of integer latents under frozen per-channel CDF tables.

mod bitstream;
mod cdf;
mod range;

pub use bitstream::{LatentBitstream, PatchGrid, BITSTREAM_MAGIC, BITSTREAM_VERSION};
pub use cdf::{CdfTable, ChannelCdf, PRECISION_BITS, TOTAL};
pub use range::{RangeDecoder, RangeEncoder};

use crate::error::{invalid, shape_err, Error, Result};

/// Out-of-range symbols follow the escape slot as two uniform 16-bit chunks.
pub const ESCAPE_RAW_BITS: u32 = 32;

pub fn encode_symbol(enc: &mut RangeEncoder, cdf: &ChannelCdf, symbol: i32) -> Result<()> {
    match cdf.slot_of(symbol) {
        Some(s) => enc.encode(cdf.start(s), cdf.freq(s)),
        None => {
            let e = cdf
                .escape_slot()
                .ok_or_else(|| invalid(format!("symbol {symbol} outside [{}, {}] and no escape", cdf.smin, cdf.smax)))?;
            enc.encode(cdf.start(e), cdf.freq(e));
            let raw = symbol as u32;
            enc.encode(raw >> 16, 1);
            enc.encode(raw & 0xFFFF, 1);
        }
    }
    Ok(())
}

pub fn decode_symbol(dec: &mut RangeDecoder, cdf: &ChannelCdf) -> Result<i32> {
    let slot = cdf.lookup(dec.peek()?);
    dec.consume(cdf.start(slot), cdf.freq(slot))?;
    if Some(slot) == cdf.escape_slot() {
        let hi = dec.peek()?;
        dec.consume(hi, 1)?;
        let lo = dec.peek()?;
        dec.consume(lo, 1)?;
        return Ok(((hi << 16) | lo) as i32);
    }
    Ok(cdf.smin + slot as i32)
}

fn finish_decode(dec: &RangeDecoder, bytes: &[u8]) -> Result<()> {
    if dec.consumed() != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} unused bytes after the last symbol",
            bytes.len() - dec.consumed()
        )));
    }
    Ok(())
}

/// Codes a single-channel symbol sequence.
pub fn ac_encode(symbols: &[i32], cdf: &ChannelCdf) -> Result<Vec<u8>> {
    if symbols.is_empty() {
        return Ok(Vec::new());
    }
    let mut enc = RangeEncoder::new();
    for &s in symbols {
        encode_symbol(&mut enc, cdf, s)?;
    }
    Ok(enc.finish())
}

pub fn ac_decode(bytes: &[u8], cdf: &ChannelCdf, count: usize) -> Result<Vec<i32>> {
    if count == 0 {
        return if bytes.is_empty() {
            Ok(Vec::new())
        } else {
            Err(Error::Corrupt("bytes present for an empty symbol list".into()))
        };
    }
    let mut dec = RangeDecoder::new(bytes)?;
    let out = (0..count).map(|_| decode_symbol(&mut dec, cdf)).collect::<Result<Vec<_>>>()?;
    finish_decode(&dec, bytes)?;
    Ok(out)
}

/// Codes a channel-major latent (`channels` planes of `plane` symbols).
pub fn encode_latent(symbols: &[i32], plane: usize, table: &CdfTable) -> Result<Vec<u8>> {
    if symbols.len() != plane * table.channels() {
        return Err(shape_err(
            "encode_latent",
            format!("{} symbols for {} channels of {plane}", symbols.len(), table.channels()),
        ));
    }
    if symbols.is_empty() {
        return Ok(Vec::new());
    }
    let mut enc = RangeEncoder::new();
    for (i, &s) in symbols.iter().enumerate() {
        encode_symbol(&mut enc, &table.channels[i / plane], s)?;
    }
    Ok(enc.finish())
}

pub fn decode_latent(bytes: &[u8], plane: usize, table: &CdfTable) -> Result<Vec<i32>> {
    let n = plane * table.channels();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut dec = RangeDecoder::new(bytes)?;
    let out = (0..n)
        .map(|i| decode_symbol(&mut dec, &table.channels[i / plane]))
        .collect::<Result<Vec<_>>>()?;
    finish_decode(&dec, bytes)?;
    Ok(out)
}

/// Ideal code length in bits of a channel-major latent under `table`.
pub fn ideal_bits(symbols: &[i32], plane: usize, table: &CdfTable) -> f64 {
    symbols
        .iter()
        .enumerate()
        .map(|(i, &s)| table.channels[i / plane].cost_bits(s))
        .sum()
}
